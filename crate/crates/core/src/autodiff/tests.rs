use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

#[test]
fn analytic_values() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let sp = g.softplus(z).unwrap();
    let sg = g.sigmoid(z).unwrap();
    assert!((g.value(sp).item() - std::f64::consts::LN_2).abs() < 1e-15);
    assert_eq!(g.value(sg).item(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3], -1.0, 1.0);
    let eye = Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 });
    let i = g.constant(eye);
    let av = g.constant(a.clone());
    let p = g.matmul(i, av).unwrap();
    assert_eq!(g.value(p), &a);
}

#[test]
fn scalar_derivatives() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.square(x).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).item(), 6.0);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.0));
    let y = g.softplus(x).unwrap();
    assert_eq!(g.backward(y).unwrap().get(x).item(), 0.5);
}

#[test]
fn grad_check_exact_on_linear_graph() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[4], vec![0.1, -2.0, 3.5, 7.0]).unwrap());
    let y = g.scale(x, 3.0).unwrap();
    let s = g.sum(y).unwrap();
    assert!(grad_check(&mut g, s, x, 1e-5).unwrap() < 1e-10);
}

#[test]
fn grad_check_zero_gradient_leaf() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[3], 1.0));
    let unused = g.param(Tensor::full(&[2], 5.0));
    let s = g.sum(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(unused).data(), &[0.0, 0.0]);
    assert_eq!(grad_check(&mut g, s, unused, 1e-5).unwrap(), 0.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[3], 1.0));
    assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(matches!(g.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    assert!(matches!(g.matmul(a, a), Err(AutodiffError::ShapeMismatch { .. })));
}

#[test]
fn non_finite_is_surfaced() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(800.0));
    assert!(matches!(g.exp(a), Err(AutodiffError::NonFinite { op: "exp", .. })));
}

#[test]
fn guarded_log_and_division_use_floor() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
    let l = g.log(x).unwrap();
    assert_eq!(g.value(l).data()[0], GUARD_EPS.ln());
    let s = g.sum(l).unwrap();
    let gr = g.backward(s).unwrap().get(x);
    assert_eq!(gr.data(), &[0.0, 0.5]);
}

/// Builds `sum(w ⊙ op(inputs))` for a fixed random weighting `w` so every
/// output element contributes a distinct gradient.
fn check_op(
    shapes: &[&[usize]],
    lo: f64,
    hi: f64,
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let leaves: Vec<Var> = shapes.iter().map(|s| g.param(rand_tensor(&mut rng, s, lo, hi))).collect();
    let out = build(&mut g, &leaves).unwrap();
    let w = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let wv = g.constant(w);
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    for &leaf in &leaves {
        let err = grad_check(&mut g, loss, leaf, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err} for leaf {:?}", leaf);
    }
}

#[test]
fn op_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_op(&[&[2, 3], &[2, 3]], -1.0, 1.0, seed, |g, v| g.add(v[0], v[1]));
        check_op(&[&[2, 3], &[3]], -1.0, 1.0, seed, |g, v| g.sub(v[0], v[1]));
        check_op(&[&[2, 1, 3], &[4, 1]], -1.0, 1.0, seed, |g, v| g.mul(v[0], v[1]));
        check_op(&[&[2, 3], &[2, 1]], 0.5, 2.0, seed, |g, v| g.div(v[0], v[1]));
        check_op(&[&[5]], -1.0, 1.0, seed, |g, v| g.exp(v[0]));
        check_op(&[&[5]], 0.2, 3.0, seed, |g, v| g.log(v[0]));
        check_op(&[&[5]], 0.2, 3.0, seed, |g, v| g.recip(v[0]));
        check_op(&[&[5]], 0.2, 3.0, seed, |g, v| g.powf(v[0], -0.5));
        check_op(&[&[5]], -3.0, 3.0, seed, |g, v| g.sigmoid(v[0]));
        check_op(&[&[5]], -3.0, 3.0, seed, |g, v| g.softplus(v[0]));
        check_op(&[&[5]], -3.0, 3.0, seed, |g, v| g.square(v[0]));
        check_op(&[&[3, 4], &[3]], -1.0, 1.0, seed, |g, v| g.prelu(v[0], v[1]));
        check_op(&[&[2, 3, 4]], -1.0, 1.0, seed, |g, v| g.sum_axis(v[0], 1, false));
        check_op(&[&[2, 3, 4]], -1.0, 1.0, seed, |g, v| g.sum_axis(v[0], 2, true));
        check_op(&[&[2, 3, 4], &[2, 4, 5]], -1.0, 1.0, seed, |g, v| g.matmul(v[0], v[1]));
        check_op(&[&[3, 4], &[2, 4, 2]], -1.0, 1.0, seed, |g, v| g.matmul(v[0], v[1]));
        check_op(&[&[2, 3, 4], &[4, 2]], -1.0, 1.0, seed, |g, v| g.matmul(v[0], v[1]));
        check_op(&[&[3, 7], &[2, 3, 5], &[2]], -1.0, 1.0, seed, |g, v| g.conv1d(v[0], v[1], v[2], 1));
        check_op(&[&[3, 9], &[2, 3, 3], &[2]], -1.0, 1.0, seed, |g, v| g.conv1d(v[0], v[1], v[2], 2));
        check_op(&[&[2, 3, 4]], -1.0, 1.0, seed, |g, v| g.permute(v[0], &[2, 0, 1]));
        check_op(&[&[2, 3, 4]], -1.0, 1.0, seed, |g, v| g.narrow(v[0], 1, 1, 2));
        check_op(&[&[2, 3], &[2, 2]], -1.0, 1.0, seed, |g, v| g.concat(&[v[0], v[1]], 1));
        check_op(&[&[2, 6]], -1.0, 1.0, seed, |g, v| g.reshape(v[0], &[3, 4]));
        check_op(&[&[2, 3, 3], &[2, 3, 3]], -1.0, 1.0, seed, |g, v| {
            // Diagonal shift keeps the random matrices well away from singular.
            let eye = g.constant(Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 2.0 } else { 0.0 }));
            let re = g.add(v[0], eye)?;
            g.logabsdet_complex(re, v[1])
        });
        check_op(&[&[2, 3], &[2, 3], &[2, 3, 3], &[2, 3, 3], &[2, 3], &[2, 3]], -1.0, 1.0, seed, |g, v| {
            let a = CVar { re: v[0], im: v[1] };
            let u = CVar { re: v[2], im: v[3] };
            let b = CVar { re: v[4], im: v[5] };
            let h = g.c_hermitian_form(a, u, b)?;
            let abs = g.c_abs2(h)?;
            g.add(abs, h.re)
        });
    }
}

#[test]
fn forward_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&mut rng, &[3, 10], -1.0, 1.0));
    let w = g.param(rand_tensor(&mut rng, &[4, 3, 5], -1.0, 1.0));
    let b = g.param(rand_tensor(&mut rng, &[4], -1.0, 1.0));
    let y = g.conv1d(x, w, b, 1).unwrap();
    let y = g.softplus(y).unwrap();
    let l = g.mean(y).unwrap();
    let first = g.value(l).item();
    let xv = g.value(x).clone();
    for _ in 0..3 {
        g.forward(&[(x, xv.clone())]).unwrap();
        assert_eq!(g.value(l).item().to_bits(), first.to_bits());
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut g = Graph::new();
        let x = g.param(rand_tensor(&mut rng, &[3, 4], -1.0, 1.0));
        let m = g.param(rand_tensor(&mut rng, &[4, 2], -1.0, 1.0));
        let h = g.matmul(x, m).unwrap();
        let a = g.sigmoid(h).unwrap();
        let l1 = g.sum(a).unwrap();
        let e = g.exp(x).unwrap();
        let l2 = g.mean(e).unwrap();
        let total = g.add(l1, l2).unwrap();
        let (g1, g2, gt) = (g.backward(l1).unwrap(), g.backward(l2).unwrap(), g.backward(total).unwrap());
        for leaf in [x, m] {
            let (a1, a2, at) = (g1.get(leaf), g2.get(leaf), gt.get(leaf));
            for k in 0..at.numel() {
                assert!((a1.data()[k] + a2.data()[k] - at.data()[k]).abs() < 1e-12);
            }
        }
    }
}
