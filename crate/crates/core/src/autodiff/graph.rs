use num_complex::Complex64;

use super::tensor::{
    broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, strides, Tensor,
};
use super::{AutodiffError, GUARD_EPS};
use crate::linalg::{complex_inverse, complex_logabsdet};

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Square(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Powf(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Prelu { x: Var, alpha: Var },
    SumAll(Var),
    SumAxis { x: Var, axis: usize, keepdim: bool },
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, dilation: usize },
    Reshape(Var, Vec<usize>),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize, len: usize },
    Concat { parts: Vec<Var>, axis: usize },
    LogAbsDetComplex { re: Var, im: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Powf(..) => "powf",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Prelu { .. } => "prelu",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::LogAbsDetComplex { .. } => "logabsdet",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Powf(a, _)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::SumAll(a)
            | Op::Reshape(a, _)
            | Op::Permute(a, _) => vec![*a],
            Op::SumAxis { x, .. } | Op::Narrow { x, .. } => vec![*x],
            Op::Prelu { x, alpha } => vec![*x, *alpha],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LogAbsDetComplex { re, im } => vec![*re, *im],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tape of tensor operations, evaluated eagerly as it is built.
///
/// Nodes are stored in creation order, which is a topological order. The
/// whole tape can be re-evaluated with new leaf values through
/// [`Graph::forward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros when no path from `v` reaches the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn push(&mut self, op: Op) -> Result<Var, AutodiffError> {
        let value = compute(&op, &self.nodes)?;
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name(), node: idx });
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(idx))
    }

    /// Rebinds leaf values and recomputes every derived node in tape order.
    pub fn forward(&mut self, bindings: &[(Var, Tensor)]) -> Result<(), AutodiffError> {
        for (v, t) in bindings {
            let node = &mut self.nodes[v.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(AutodiffError::NotALeaf(v.0));
            }
            if node.value.shape() != t.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "bind",
                    detail: format!("{:?} vs {:?}", node.value.shape(), t.shape()),
                });
            }
            node.value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = compute(&self.nodes[i].op, &self.nodes)?;
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite { op: self.nodes[i].op.name(), node: i });
            }
            self.nodes[i].value = value;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Mul(a, b))
    }
    /// `a / max(b, eps)`; intended for positive denominators.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Neg(a))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Square(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Exp(a))
    }
    /// `ln(max(a, eps))`.
    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Log(a))
    }
    /// `1 / max(a, eps)`.
    pub fn recip(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Recip(a))
    }
    /// `max(a, eps)^p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var, AutodiffError> {
        self.push(Op::Powf(a, p))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Sigmoid(a))
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Softplus(a))
    }
    /// Per-channel PReLU; `alpha` has one slope per entry of axis 0 of `x`.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var, AutodiffError> {
        self.push(Op::Prelu { x, alpha })
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.push(Op::SumAll(a))
    }
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var, AutodiffError> {
        self.push(Op::SumAxis { x, axis, keepdim })
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }
    /// Matrix product over the last two axes. Leading (batch) axes must
    /// agree, or one operand may be a plain 2-D matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.push(Op::MatMul(a, b))
    }
    /// Same-padded 1-D convolution: `x` is `[C_in, T]`, `w` is
    /// `[C_out, C_in, K]` with odd `K`, `b` is `[C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var, AutodiffError> {
        self.push(Op::Conv1d { x, w, b, dilation })
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        self.push(Op::Permute(a, perm.to_vec()))
    }
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.push(Op::Narrow { x, axis, start, len })
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        self.push(Op::Concat { parts: parts.to_vec(), axis })
    }
    /// `ln |det(re + i·im)|` over the trailing square axes.
    pub fn logabsdet_complex(&mut self, re: Var, im: Var) -> Result<Var, AutodiffError> {
        self.push(Op::LogAbsDetComplex { re, im })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, reduce_to_shape(g, out.shape(), val(*a).shape()));
                }
                if wants(*b) {
                    acc(*b, reduce_to_shape(g, out.shape(), val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, reduce_to_shape(g, out.shape(), val(*a).shape()));
                }
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    acc(*b, reduce_to_shape(&neg, out.shape(), val(*b).shape()));
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(nodes[i].op, Op::Div(..));
                let (ta, tb) = (val(*a), val(*b));
                let os = out.shape();
                let sa = broadcast_strides(ta.shape(), os);
                let sb = broadcast_strides(tb.shape(), os);
                let (ad, bd) = (ta.data(), tb.data());
                if wants(*a) {
                    let mut full = vec![0.0; g.len()];
                    for_each_broadcast(os, &sa, &sb, |o, _, ib| {
                        full[o] = if is_div { g[o] / bd[ib].max(GUARD_EPS) } else { g[o] * bd[ib] };
                    });
                    acc(*a, reduce_to_shape(&full, os, ta.shape()));
                }
                if wants(*b) {
                    let mut full = vec![0.0; g.len()];
                    for_each_broadcast(os, &sa, &sb, |o, ia, ib| {
                        full[o] = if is_div {
                            if bd[ib] > GUARD_EPS {
                                -g[o] * ad[ia] / (bd[ib] * bd[ib])
                            } else {
                                0.0
                            }
                        } else {
                            g[o] * ad[ia]
                        };
                    });
                    acc(*b, reduce_to_shape(&full, os, tb.shape()));
                }
            }
            Op::Neg(a) => acc(*a, g.iter().map(|x| -x).collect()),
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a, _) | Op::Reshape(a, _) => acc(*a, g.to_vec()),
            Op::Square(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect())
            }
            Op::Exp(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > GUARD_EPS { g / x } else { 0.0 }).collect())
            }
            Op::Recip(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| if x > GUARD_EPS { -g / (x * x) } else { 0.0 }).collect())
            }
            Op::Powf(a, p) => {
                let x = val(*a).data();
                acc(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > GUARD_EPS { g * p * x.powf(p - 1.0) } else { 0.0 })
                        .collect(),
                )
            }
            Op::Sigmoid(a) => acc(*a, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Softplus(a) => {
                let x = val(*a).data();
                acc(*a, g.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect())
            }
            Op::Prelu { x, alpha } => {
                let (xt, at) = (val(*x), val(*alpha));
                let c = xt.shape()[0];
                let inner = xt.numel() / c.max(1);
                let (xd, ad) = (xt.data(), at.data());
                if wants(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    for ch in 0..c {
                        for k in ch * inner..(ch + 1) * inner {
                            gx[k] = if xd[k] > 0.0 { g[k] } else { g[k] * ad[ch] };
                        }
                    }
                    acc(*x, gx);
                }
                if wants(*alpha) {
                    let mut ga = vec![0.0; c];
                    for ch in 0..c {
                        for k in ch * inner..(ch + 1) * inner {
                            if xd[k] <= 0.0 {
                                ga[ch] += g[k] * xd[k];
                            }
                        }
                    }
                    acc(*alpha, ga);
                }
            }
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).numel()]),
            Op::SumAxis { x, axis, .. } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    for k in 0..n {
                        let dst = &mut gx[(o * n + k) * inner..(o * n + k + 1) * inner];
                        dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, gx);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let dims = matmul_dims(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (dims.m, dims.k, dims.n);
                if wants(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for bi in 0..dims.batch {
                        let oa = if dims.a_batched { bi * m * k } else { 0 };
                        let ob = if dims.b_batched { bi * k * n } else { 0 };
                        gemm_nt(m, k, n, &g[bi * m * n..(bi + 1) * m * n], &tb.data()[ob..ob + k * n], &mut ga[oa..oa + m * k]);
                    }
                    acc(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for bi in 0..dims.batch {
                        let oa = if dims.a_batched { bi * m * k } else { 0 };
                        let ob = if dims.b_batched { bi * k * n } else { 0 };
                        gemm_tn(m, k, n, &ta.data()[oa..oa + m * k], &g[bi * m * n..(bi + 1) * m * n], &mut gb[ob..ob + k * n]);
                    }
                    acc(*b, gb);
                }
            }
            Op::Conv1d { x, w, b, dilation } => {
                let (xt, wt) = (val(*x), val(*w));
                let (cin, t) = (xt.shape()[0], xt.shape()[1]);
                let (cout, kw) = (wt.shape()[0], wt.shape()[2]);
                let pad = dilation * (kw - 1) / 2;
                if wants(*b) {
                    acc(*b, (0..cout).map(|co| g[co * t..(co + 1) * t].iter().sum()).collect());
                }
                let want_x = wants(*x);
                let want_w = wants(*w);
                let mut gx = if want_x { vec![0.0; xt.numel()] } else { Vec::new() };
                let mut gw = if want_w { vec![0.0; wt.numel()] } else { Vec::new() };
                let (xd, wd) = (xt.data(), wt.data());
                for co in 0..cout {
                    let grow = &g[co * t..(co + 1) * t];
                    for ci in 0..cin {
                        for kk in 0..kw {
                            let Some((o0, i0, len)) = conv_span(t, kk * dilation, pad) else { continue };
                            let widx = (co * cin + ci) * kw + kk;
                            if want_x {
                                let wv = wd[widx];
                                let dst = &mut gx[ci * t + i0..ci * t + i0 + len];
                                for (d, s) in dst.iter_mut().zip(&grow[o0..o0 + len]) {
                                    *d += wv * s;
                                }
                            }
                            if want_w {
                                let src = &xd[ci * t + i0..ci * t + i0 + len];
                                gw[widx] += dot(&grow[o0..o0 + len], src);
                            }
                        }
                    }
                }
                if want_x {
                    acc(*x, gx);
                }
                if want_w {
                    acc(*w, gw);
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(out.shape(), g.to_vec()).expect("grad shape");
                acc(*a, permute_tensor(&gt, &inv).into_data());
            }
            Op::Narrow { x, axis, start, len } => {
                let xs = val(*x).shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                    dst.copy_from_slice(src);
                }
                acc(*x, gx);
            }
            Op::Concat { parts, axis } => {
                let os = out.shape();
                let (outer, total, inner) = split_axis(os, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        let mut gp = vec![0.0; val(p).numel()];
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            gp[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
                        }
                        acc(p, gp);
                    }
                    offset += len;
                }
            }
            Op::LogAbsDetComplex { re, im } => {
                let (tr, ti) = (val(*re), val(*im));
                let s = tr.shape();
                let m = s[s.len() - 1];
                let batch = tr.numel() / (m * m);
                let mut gr = vec![0.0; tr.numel()];
                let mut gi = vec![0.0; ti.numel()];
                for bi in 0..batch {
                    let off = bi * m * m;
                    let a: Vec<Complex64> = (0..m * m)
                        .map(|k| Complex64::new(tr.data()[off + k], ti.data()[off + k]))
                        .collect();
                    let inv = complex_inverse(&a, m).expect("nonsingular in forward");
                    for r in 0..m {
                        for c in 0..m {
                            // d ln|det Q| / dQ_rc = (Q^{-1})_cr in the real view.
                            let p = inv[c * m + r];
                            gr[off + r * m + c] = g[bi] * p.re;
                            gi[off + r * m + c] = -g[bi] * p.im;
                        }
                    }
                }
                acc(*re, gr);
                acc(*im, gi);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Output/input offsets and run length of kernel tap `shift` for a
/// same-padded convolution of length `t`.
fn conv_span(t: usize, shift: usize, pad: usize) -> Option<(usize, usize, usize)> {
    // input index = out index + shift - pad
    let o0 = pad.saturating_sub(shift);
    let o1 = (t + pad).saturating_sub(shift).min(t);
    if o1 <= o0 {
        return None;
    }
    Some((o0, o0 + shift - pad, o1 - o0))
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims, AutodiffError> {
    let err = || AutodiffError::ShapeMismatch { op: "matmul", detail: format!("{:?} x {:?}", a, b) };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let (batch_shape, a_batched, b_batched) = if ba == bb {
        (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
    } else if ba.is_empty() {
        (bb.to_vec(), false, true)
    } else if bb.is_empty() {
        (ba.to_vec(), true, false)
    } else {
        return Err(err());
    };
    let batch = batch_shape.iter().product();
    let mut out_shape = batch_shape;
    out_shape.extend([m, n]);
    Ok(MatmulDims { batch, m, k, n, a_batched, b_batched, out_shape })
}

/// `c += a · b` with `a: [m,k]`, `b: [k,n]`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `ga += g · bᵀ` with `g: [m,n]`, `b: [k,n]`.
fn gemm_nt(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], ga: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            ga[i * k + p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `gb += aᵀ · g` with `a: [m,k]`, `g: [m,n]`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], gb: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, s) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *d += av * s;
            }
        }
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let in_strides = strides(s);
    // Stride in the input for each output axis.
    let st: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![0.0; t.numel()];
    let d = t.data();
    for_each_broadcast(&out_shape, &st, &zeros, |o, i, _| out[o] = d[i]);
    Tensor::new(&out_shape, out).expect("permute shape")
}

fn compute(op: &Op, nodes: &[Node]) -> Result<Tensor, AutodiffError> {
    let val = |v: &Var| &nodes[v.0].value;
    let map = |v: &Var, f: &dyn Fn(f64) -> f64| {
        let t = val(v);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect())
    };
    match op {
        Op::Leaf => unreachable!("leaves are never recomputed"),
        Op::Add(a, b) => binary(val(a), val(b), "add", |x, y| x + y),
        Op::Sub(a, b) => binary(val(a), val(b), "sub", |x, y| x - y),
        Op::Mul(a, b) => binary(val(a), val(b), "mul", |x, y| x * y),
        Op::Div(a, b) => binary(val(a), val(b), "div", |x, y| x / y.max(GUARD_EPS)),
        Op::Neg(a) => map(a, &|x| -x),
        Op::Scale(a, c) => map(a, &|x| x * c),
        Op::AddScalar(a, c) => map(a, &|x| x + c),
        Op::Square(a) => map(a, &|x| x * x),
        Op::Exp(a) => map(a, &f64::exp),
        Op::Log(a) => map(a, &|x| x.max(GUARD_EPS).ln()),
        Op::Recip(a) => map(a, &|x| 1.0 / x.max(GUARD_EPS)),
        Op::Powf(a, p) => map(a, &|x| x.max(GUARD_EPS).powf(*p)),
        Op::Sigmoid(a) => map(a, &sigmoid),
        Op::Softplus(a) => map(a, &softplus),
        Op::Prelu { x, alpha } => {
            let (xt, at) = (val(x), val(alpha));
            if xt.ndim() == 0 || at.shape() != [xt.shape()[0]] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "prelu",
                    detail: format!("{:?} with slopes {:?}", xt.shape(), at.shape()),
                });
            }
            let c = xt.shape()[0];
            let inner = xt.numel() / c.max(1);
            let mut out = xt.data().to_vec();
            for ch in 0..c {
                let a = at.data()[ch];
                for v in &mut out[ch * inner..(ch + 1) * inner] {
                    if *v <= 0.0 {
                        *v *= a;
                    }
                }
            }
            Tensor::new(xt.shape(), out)
        }
        Op::SumAll(a) => Ok(Tensor::scalar(val(a).data().iter().sum())),
        Op::SumAxis { x, axis, keepdim } => {
            let xt = val(x);
            if *axis >= xt.ndim() {
                return Err(AutodiffError::ShapeMismatch { op: "sum_axis", detail: format!("axis {} of {:?}", axis, xt.shape()) });
            }
            let (outer, n, inner) = split_axis(xt.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            let d = xt.data();
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for k in 0..n {
                    for (dv, sv) in dst.iter_mut().zip(&d[(o * n + k) * inner..(o * n + k + 1) * inner]) {
                        *dv += sv;
                    }
                }
            }
            let mut shape = xt.shape().to_vec();
            if *keepdim {
                shape[*axis] = 1;
            } else {
                shape.remove(*axis);
            }
            Tensor::new(&shape, out)
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let d = matmul_dims(ta.shape(), tb.shape())?;
            let mut out = vec![0.0; d.batch * d.m * d.n];
            for bi in 0..d.batch {
                let oa = if d.a_batched { bi * d.m * d.k } else { 0 };
                let ob = if d.b_batched { bi * d.k * d.n } else { 0 };
                gemm(
                    d.m,
                    d.k,
                    d.n,
                    &ta.data()[oa..oa + d.m * d.k],
                    &tb.data()[ob..ob + d.k * d.n],
                    &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                );
            }
            Tensor::new(&d.out_shape, out)
        }
        Op::Conv1d { x, w, b, dilation } => {
            let (xt, wt, bt) = (val(x), val(w), val(b));
            let bad = xt.ndim() != 2
                || wt.ndim() != 3
                || wt.shape()[1] != xt.shape()[0]
                || wt.shape()[2] % 2 == 0
                || bt.shape() != [wt.shape()[0]]
                || *dilation == 0;
            if bad {
                return Err(AutodiffError::ShapeMismatch {
                    op: "conv1d",
                    detail: format!("x {:?}, w {:?}, b {:?}", xt.shape(), wt.shape(), bt.shape()),
                });
            }
            let (cin, t) = (xt.shape()[0], xt.shape()[1]);
            let (cout, kw) = (wt.shape()[0], wt.shape()[2]);
            let pad = dilation * (kw - 1) / 2;
            let mut out = vec![0.0; cout * t];
            let (xd, wd) = (xt.data(), wt.data());
            for co in 0..cout {
                let orow = &mut out[co * t..(co + 1) * t];
                orow.iter_mut().for_each(|v| *v = bt.data()[co]);
                for ci in 0..cin {
                    for kk in 0..kw {
                        let wv = wd[(co * cin + ci) * kw + kk];
                        if wv == 0.0 {
                            continue;
                        }
                        let Some((o0, i0, len)) = conv_span(t, kk * dilation, pad) else { continue };
                        let src = &xd[ci * t + i0..ci * t + i0 + len];
                        for (d, s) in orow[o0..o0 + len].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
            Tensor::new(&[cout, t], out)
        }
        Op::Reshape(a, shape) => val(a).clone().reshaped(shape),
        Op::Permute(a, perm) => {
            let t = val(a);
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..t.ndim()).collect::<Vec<_>>() {
                return Err(AutodiffError::ShapeMismatch { op: "permute", detail: format!("{:?} of {:?}", perm, t.shape()) });
            }
            Ok(permute_tensor(t, perm))
        }
        Op::Narrow { x, axis, start, len } => {
            let xt = val(x);
            if *axis >= xt.ndim() || start + len > xt.shape()[*axis] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "narrow",
                    detail: format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, xt.shape()),
                });
            }
            let (outer, n, inner) = split_axis(xt.shape(), *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&xt.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
            let mut shape = xt.shape().to_vec();
            shape[*axis] = *len;
            Tensor::new(&shape, out)
        }
        Op::Concat { parts, axis } => {
            let first = val(&parts[0]).shape().to_vec();
            let mut total = 0;
            for p in parts {
                let s = val(p).shape();
                let compatible = s.len() == first.len()
                    && *axis < s.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(AutodiffError::ShapeMismatch { op: "concat", detail: format!("{:?} vs {:?}", s, first) });
                }
                total += s[*axis];
            }
            let mut shape = first.clone();
            shape[*axis] = total;
            let (outer, _, inner) = split_axis(&shape, *axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for p in parts {
                    let t = val(p);
                    let len = t.shape()[*axis];
                    out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Tensor::new(&shape, out)
        }
        Op::LogAbsDetComplex { re, im } => {
            let (tr, ti) = (val(re), val(im));
            let s = tr.shape();
            if s != ti.shape() || s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(AutodiffError::ShapeMismatch { op: "logabsdet", detail: format!("{:?} / {:?}", s, ti.shape()) });
            }
            let m = s[s.len() - 1];
            let batch = tr.numel() / (m * m).max(1);
            let mut out = Vec::with_capacity(batch);
            for bi in 0..batch {
                let off = bi * m * m;
                let a: Vec<Complex64> =
                    (0..m * m).map(|k| Complex64::new(tr.data()[off + k], ti.data()[off + k])).collect();
                out.push(complex_logabsdet(&a, m).ok_or(AutodiffError::Singular { batch: bi })?);
            }
            Tensor::new(&s[..s.len() - 2], out)
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, AutodiffError> {
    if a.shape() == b.shape() {
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), out);
    }
    let os = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| AutodiffError::ShapeMismatch { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) })?;
    let sa = broadcast_strides(a.shape(), &os);
    let sb = broadcast_strides(b.shape(), &os);
    let mut out = vec![0.0; os.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&os, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::new(&os, out)
}
