//! Complex-valued helpers built from pairs of real tensors.
//!
//! Gradients are taken in the real view: real and imaginary planes are
//! independent real variables.

use super::{AutodiffError, Graph, Tensor, Var};

/// A complex tensor held as separate real and imaginary planes of equal shape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl Graph {
    pub fn c_constant(&mut self, re: Tensor, im: Tensor) -> CVar {
        CVar { re: self.constant(re), im: self.constant(im) }
    }

    pub fn c_add(&mut self, a: CVar, b: CVar) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: self.add(a.re, b.re)?, im: self.add(a.im, b.im)? })
    }

    pub fn c_sub(&mut self, a: CVar, b: CVar) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: self.sub(a.re, b.re)?, im: self.sub(a.im, b.im)? })
    }

    pub fn c_conj(&mut self, a: CVar) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: a.re, im: self.neg(a.im)? })
    }

    /// Elementwise complex product with broadcasting.
    pub fn c_mul(&mut self, a: CVar, b: CVar) -> Result<CVar, AutodiffError> {
        let rr = self.mul(a.re, b.re)?;
        let ii = self.mul(a.im, b.im)?;
        let ri = self.mul(a.re, b.im)?;
        let ir = self.mul(a.im, b.re)?;
        Ok(CVar { re: self.sub(rr, ii)?, im: self.add(ri, ir)? })
    }

    /// Product of a complex tensor with a real one (broadcasting).
    pub fn c_mul_real(&mut self, a: CVar, r: Var) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: self.mul(a.re, r)?, im: self.mul(a.im, r)? })
    }

    /// `|a|²` elementwise.
    pub fn c_abs2(&mut self, a: CVar) -> Result<Var, AutodiffError> {
        let r = self.square(a.re)?;
        let i = self.square(a.im)?;
        self.add(r, i)
    }

    /// Complex matrix product over the last two axes (see [`Graph::matmul`]).
    pub fn c_matmul(&mut self, a: CVar, b: CVar) -> Result<CVar, AutodiffError> {
        let rr = self.matmul(a.re, b.re)?;
        let ii = self.matmul(a.im, b.im)?;
        let ri = self.matmul(a.re, b.im)?;
        let ir = self.matmul(a.im, b.re)?;
        Ok(CVar { re: self.sub(rr, ii)?, im: self.add(ri, ir)? })
    }

    pub fn c_sum_axis(&mut self, a: CVar, axis: usize, keepdim: bool) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: self.sum_axis(a.re, axis, keepdim)?, im: self.sum_axis(a.im, axis, keepdim)? })
    }

    pub fn c_reshape(&mut self, a: CVar, shape: &[usize]) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: self.reshape(a.re, shape)?, im: self.reshape(a.im, shape)? })
    }

    pub fn c_permute(&mut self, a: CVar, perm: &[usize]) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: self.permute(a.re, perm)?, im: self.permute(a.im, perm)? })
    }

    pub fn c_narrow(&mut self, a: CVar, axis: usize, start: usize, len: usize) -> Result<CVar, AutodiffError> {
        Ok(CVar { re: self.narrow(a.re, axis, start, len)?, im: self.narrow(a.im, axis, start, len)? })
    }

    /// Batched Hermitian form `aᴴ U b` over the trailing axes: `a` and `b`
    /// are `[.., M]`, `u` is `[.., M, M]`; leading axes broadcast.
    pub fn c_hermitian_form(&mut self, a: CVar, u: CVar, b: CVar) -> Result<CVar, AutodiffError> {
        let bs = self.shape(b.re).to_vec();
        let mut row = bs.clone();
        row.insert(bs.len() - 1, 1);
        let b_row = self.c_reshape(b, &row)?;
        let ub = self.c_mul(u, b_row)?;
        let last = self.shape(ub.re).len() - 1;
        let ub = self.c_sum_axis(ub, last, false)?;
        let ac = self.c_conj(a)?;
        let prod = self.c_mul(ac, ub)?;
        let last = self.shape(prod.re).len() - 1;
        self.c_sum_axis(prod, last, false)
    }

    /// `ln |det(a)|` over the trailing square axes.
    pub fn c_logabsdet(&mut self, a: CVar) -> Result<Var, AutodiffError> {
        self.logabsdet_complex(a.re, a.im)
    }
}
