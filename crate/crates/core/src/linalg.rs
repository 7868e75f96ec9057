//! Small dense complex linear algebra for the spatial model.
//!
//! Everything here works on M×M matrices with M the microphone count (2 to
//! 8 in practice), so plain loops beat any blocked formulation.

use num_complex::Complex64;
use thiserror::Error;

/// Relative ridge added before factorizing accumulated covariances:
/// `H + RIDGE_EPS · tr(H)/M · I`.
pub const RIDGE_EPS: f64 = 1e-10;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is singular")]
    Singular,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("weight {value} at frame {frame} is outside [0, 1]")]
    InvalidWeight { frame: usize, value: f64 },
}

/// General square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, data: vec![ZERO; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_fn(dim, |i, j| if i == j { ONE } else { ZERO })
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                data.push(f(i, j));
            }
        }
        Self { dim, data }
    }

    pub fn from_rows(dim: usize, data: Vec<Complex64>) -> Result<Self, LinalgError> {
        if data.len() != dim * dim {
            return Err(LinalgError::DimensionMismatch(format!("{} values for {dim}x{dim}", data.len())));
        }
        Ok(Self { dim, data })
    }

    pub fn diag(values: &[Complex64]) -> Self {
        Self::from_fn(values.len(), |i, j| if i == j { values[i] } else { ZERO })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: Complex64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.dim, |i, j| self.get(j, i).conj())
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let m = self.dim;
        let mut out = Self::zeros(m);
        for i in 0..m {
            for k in 0..m {
                let a = self.get(i, k);
                for j in 0..m {
                    out.data[i * m + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        (0..self.dim).map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `y = A x` into an existing buffer.
    pub fn mul_vec_into(&self, x: &[Complex64], y: &mut [Complex64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        Self { dim: self.dim, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self { dim: self.dim, data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn inverse(&self) -> Result<Self, LinalgError> {
        let inv = complex_inverse(&self.data, self.dim).ok_or(LinalgError::Singular)?;
        Ok(Self { dim: self.dim, data: inv })
    }

    /// `ln |det A|` via LU with partial pivoting.
    pub fn logabsdet(&self) -> Result<f64, LinalgError> {
        complex_logabsdet(&self.data, self.dim).ok_or(LinalgError::Singular)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Hermitian matrix stored as its packed lower triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix {
    dim: usize,
    lower: Vec<Complex64>,
}

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl HermitianMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, lower: vec![ZERO; dim * (dim + 1) / 2] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut h = Self::zeros(dim);
        for i in 0..dim {
            h.lower[packed(i, i)] = ONE;
        }
        h
    }

    /// Takes the lower triangle of `a`; diagonal imaginary parts are dropped.
    pub fn from_lower(a: &CMatrix) -> Self {
        let mut h = Self::zeros(a.dim());
        for i in 0..a.dim() {
            for j in 0..i {
                h.lower[packed(i, j)] = a.get(i, j);
            }
            h.lower[packed(i, i)] = Complex64::new(a.get(i, i).re, 0.0);
        }
        h
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut h = Self::zeros(d.len());
        for (i, &v) in d.iter().enumerate() {
            h.lower[packed(i, i)] = Complex64::new(v, 0.0);
        }
        h
    }

    /// `x xᴴ`.
    pub fn outer(x: &[Complex64]) -> Self {
        let mut h = Self::zeros(x.len());
        h.add_outer(x, 1.0);
        h
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        if j <= i {
            self.lower[packed(i, j)]
        } else {
            self.lower[packed(j, i)].conj()
        }
    }

    pub fn to_full(&self) -> CMatrix {
        CMatrix::from_fn(self.dim, |i, j| self.get(i, j))
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.lower[packed(i, i)].re).sum()
    }

    /// `self += w · x xᴴ`.
    pub fn add_outer(&mut self, x: &[Complex64], w: f64) {
        for i in 0..self.dim {
            let xi = x[i] * w;
            for j in 0..=i {
                self.lower[packed(i, j)] += xi * x[j].conj();
            }
        }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        for (a, b) in self.lower.iter_mut().zip(&other.lower) {
            *a += b * s;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.lower {
            *v *= s;
        }
    }

    /// `self + RIDGE_EPS · tr/M · I`.
    pub fn ridged(&self) -> Self {
        self.ridged_by(RIDGE_EPS)
    }

    pub fn ridged_by(&self, eps: f64) -> Self {
        let mut out = self.clone();
        let r = eps * self.trace() / self.dim as f64;
        for i in 0..self.dim {
            out.lower[packed(i, i)] += r;
        }
        out
    }

    /// `aᴴ H b`.
    pub fn form(&self, a: &[Complex64], b: &[Complex64]) -> Complex64 {
        let mut acc = ZERO;
        for i in 0..self.dim {
            let mut row = ZERO;
            for j in 0..self.dim {
                row += self.get(i, j) * b[j];
            }
            acc += a[i].conj() * row;
        }
        acc
    }

    /// Real part of `aᴴ H a`.
    pub fn quad(&self, a: &[Complex64]) -> f64 {
        self.form(a, a).re
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᴴ = H`.
pub fn cholesky(h: &HermitianMatrix) -> Result<CMatrix, LinalgError> {
    let m = h.dim();
    let mut l = CMatrix::zeros(m);
    for j in 0..m {
        let mut d = h.get(j, j).re;
        for k in 0..j {
            d -= l.get(j, k).norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l.set(j, j, Complex64::new(ljj, 0.0));
        for i in j + 1..m {
            let mut s = h.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k).conj();
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solves `L Lᴴ x = b` given the Cholesky factor `l`.
pub fn cholesky_solve_vec(l: &CMatrix, b: &[Complex64]) -> Vec<Complex64> {
    let m = l.dim();
    let mut y = b.to_vec();
    for i in 0..m {
        let mut s = y[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i).re;
    }
    for i in (0..m).rev() {
        let mut s = y[i];
        for k in i + 1..m {
            s -= l.get(k, i).conj() * y[k];
        }
        y[i] = s / l.get(i, i).re;
    }
    y
}

/// `ln det H` from its Cholesky factor.
pub fn cholesky_logdet(l: &CMatrix) -> f64 {
    2.0 * (0..l.dim()).map(|i| l.get(i, i).re.ln()).sum::<f64>()
}

/// Solves `H X = B` for Hermitian positive definite `H`.
pub fn solve_hermitian(h: &HermitianMatrix, b: &CMatrix) -> Result<CMatrix, LinalgError> {
    if h.dim() != b.dim() {
        return Err(LinalgError::DimensionMismatch(format!("H is {0}x{0}, B is {1}x{1}", h.dim(), b.dim())));
    }
    let l = cholesky(h).map_err(|_| LinalgError::Singular)?;
    let m = h.dim();
    let mut x = CMatrix::zeros(m);
    for c in 0..m {
        let col: Vec<Complex64> = (0..m).map(|r| b.get(r, c)).collect();
        let sol = cholesky_solve_vec(&l, &col);
        for r in 0..m {
            x.set(r, c, sol[r]);
        }
    }
    Ok(x)
}

/// Vector form of [`solve_hermitian`].
pub fn solve_hermitian_vec(h: &HermitianMatrix, b: &[Complex64]) -> Result<Vec<Complex64>, LinalgError> {
    if h.dim() != b.len() {
        return Err(LinalgError::DimensionMismatch(format!("H is {0}x{0}, b has {1}", h.dim(), b.len())));
    }
    let l = cholesky(h).map_err(|_| LinalgError::Singular)?;
    Ok(cholesky_solve_vec(&l, b))
}

/// `ln |det(Q Qᴴ)| = 2 ln |det Q|`.
pub fn logdet_qqh(q: &CMatrix) -> Result<f64, LinalgError> {
    Ok(2.0 * q.logabsdet()?)
}

/// Per-frequency [`logdet_qqh`].
pub fn logdet_qqh_batch(qs: &[CMatrix]) -> Result<Vec<f64>, LinalgError> {
    qs.iter().map(logdet_qqh).collect()
}

/// Mask-weighted spatial covariance `(1/T) Σ_t w_t x_t x_tᴴ`.
///
/// `frames` holds `T` consecutive M-vectors (one frequency bin of a
/// spectrogram); masks must lie in `[0, 1]`.
pub fn weighted_scm(frames: &[Complex64], weights: &[f64], m: usize) -> Result<HermitianMatrix, LinalgError> {
    if let Some((frame, &value)) = weights.iter().enumerate().find(|(_, w)| !(0.0..=1.0).contains(*w)) {
        return Err(LinalgError::InvalidWeight { frame, value });
    }
    weighted_covariance(frames, weights, m)
}

/// As [`weighted_scm`] but for arbitrary nonnegative weights.
pub fn weighted_covariance(frames: &[Complex64], weights: &[f64], m: usize) -> Result<HermitianMatrix, LinalgError> {
    let t = weights.len();
    if t == 0 {
        return Err(LinalgError::Empty("no frames"));
    }
    if frames.len() != t * m {
        return Err(LinalgError::DimensionMismatch(format!("{} values for {t} frames of {m}", frames.len())));
    }
    let mut h = HermitianMatrix::zeros(m);
    for (x, &w) in frames.chunks_exact(m).zip(weights) {
        if w != 0.0 {
            h.add_outer(x, w);
        }
    }
    h.scale(1.0 / t as f64);
    Ok(h)
}

/// Inverse of a row-major complex matrix by Gauss-Jordan with partial
/// pivoting; `None` when a pivot is exactly zero.
pub(crate) fn complex_inverse(a: &[Complex64], m: usize) -> Option<Vec<Complex64>> {
    let mut w = a.to_vec();
    let mut inv = vec![ZERO; m * m];
    for i in 0..m {
        inv[i * m + i] = ONE;
    }
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| w[x * m + col].norm().total_cmp(&w[y * m + col].norm()))?;
        if w[piv * m + col].norm() == 0.0 {
            return None;
        }
        if piv != col {
            for c in 0..m {
                w.swap(piv * m + c, col * m + c);
                inv.swap(piv * m + c, col * m + c);
            }
        }
        let d = w[col * m + col].inv();
        for c in 0..m {
            w[col * m + c] *= d;
            inv[col * m + c] *= d;
        }
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = w[r * m + col];
            if f == ZERO {
                continue;
            }
            for c in 0..m {
                let (wv, iv) = (w[col * m + c], inv[col * m + c]);
                w[r * m + c] -= f * wv;
                inv[r * m + c] -= f * iv;
            }
        }
    }
    Some(inv)
}

/// `ln |det a|` via LU with partial pivoting; `None` when exactly singular.
pub(crate) fn complex_logabsdet(a: &[Complex64], m: usize) -> Option<f64> {
    let mut w = a.to_vec();
    let mut acc = 0.0;
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| w[x * m + col].norm().total_cmp(&w[y * m + col].norm()))?;
        let p = w[piv * m + col];
        if p.norm() == 0.0 {
            return None;
        }
        if piv != col {
            for c in 0..m {
                w.swap(piv * m + c, col * m + c);
            }
        }
        acc += p.norm().ln();
        for r in col + 1..m {
            let f = w[r * m + col] / p;
            for c in col..m {
                let v = w[col * m + c];
                w[r * m + c] -= f * v;
            }
        }
    }
    Some(acc)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize) -> CMatrix {
        CMatrix::from_fn(m, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn random_psd(rng: &mut ChaCha8Rng, m: usize) -> HermitianMatrix {
        let a = random_matrix(rng, m);
        HermitianMatrix::from_lower(&a.matmul(&a.adjoint()))
    }

    fn rel_frob(a: &CMatrix, b: &CMatrix) -> f64 {
        a.sub(b).frobenius() / b.frobenius()
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(cholesky(&HermitianMatrix::identity(3)).unwrap(), CMatrix::identity(3));
        let l = cholesky(&HermitianMatrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_eq!(l, CMatrix::diag(&[c(2.0, 0.0), c(3.0, 0.0)]));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let h = random_psd(&mut rng, 4);
            let l = cholesky(&h).unwrap();
            assert!(rel_frob(&l.matmul(&l.adjoint()), &h.to_full()) < 1e-10);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let h = HermitianMatrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(cholesky(&h), Err(LinalgError::NotPositiveDefinite { pivot: 1, .. })));
        assert!(matches!(cholesky(&h.ridged()), Err(LinalgError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn ridge_rescues_rank_deficient_scm() {
        let x = [c(1.0, 0.5), c(-0.3, 2.0)];
        let h = HermitianMatrix::outer(&x);
        assert!(cholesky(&h.ridged()).is_ok());
    }

    #[test]
    fn solve_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = random_matrix(&mut rng, 3);
        let x = solve_hermitian(&HermitianMatrix::identity(3), &b).unwrap();
        assert!(rel_frob(&x, &b) < 1e-15);
        let two = HermitianMatrix::from_diag(&[2.0; 3]);
        let x = solve_hermitian(&two, &b).unwrap();
        assert!(rel_frob(&x, &b.scaled(c(0.5, 0.0))) < 1e-15);
        for _ in 0..20 {
            let h = random_psd(&mut rng, 5);
            let b = random_matrix(&mut rng, 5);
            let x = solve_hermitian(&h, &b).unwrap();
            assert!(rel_frob(&h.to_full().matmul(&x), &b) < 1e-8);
        }
        assert_eq!(solve_hermitian(&HermitianMatrix::zeros(2), &CMatrix::identity(2)), Err(LinalgError::Singular));
    }

    /// Determinant by cofactor expansion along the first row.
    fn det3(a: &CMatrix) -> Complex64 {
        let g = |i, j| a.get(i, j);
        g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1)) - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
            + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0))
    }

    #[test]
    fn logdet_examples() {
        assert_eq!(logdet_qqh(&CMatrix::identity(4)).unwrap(), 0.0);
        let q = CMatrix::diag(&[c(2.0, 0.0), c(2.0, 0.0)]);
        assert!((logdet_qqh(&q).unwrap() - 4.0 * 2f64.ln()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let mut q = random_matrix(&mut rng, 3);
            for i in 0..3 {
                q.set(i, i, q.get(i, i) + c(2.0, 0.0));
            }
            let brute = det3(&q).norm_sqr().ln();
            assert!((logdet_qqh(&q).unwrap() - brute).abs() < 1e-10);
        }
        assert_eq!(logdet_qqh(&CMatrix::zeros(2)), Err(LinalgError::Singular));
    }

    #[test]
    fn weighted_scm_examples() {
        let x = [c(1.0, -1.0), c(0.5, 2.0)];
        let h = weighted_scm(&x, &[1.0], 2).unwrap();
        assert_eq!(h, HermitianMatrix::outer(&x));
        let frames = [c(1.0, 0.0), c(2.0, 1.0), c(-1.0, 0.3), c(0.0, 1.0)];
        assert_eq!(weighted_scm(&frames, &[0.0, 0.0], 2).unwrap(), HermitianMatrix::zeros(2));
        assert_eq!(weighted_scm(&frames, &[], 2), Err(LinalgError::Empty("no frames")));
        assert!(matches!(weighted_scm(&frames, &[0.5, 1.5], 2), Err(LinalgError::InvalidWeight { frame: 1, .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 7;
        let xs: Vec<Complex64> = (0..2 * t).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let w: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
        let h = weighted_scm(&xs, &w, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut naive = c(0.0, 0.0);
                for k in 0..t {
                    naive += w[k] * xs[2 * k + i] * xs[2 * k + j].conj();
                }
                naive /= t as f64;
                assert!((h.get(i, j) - naive).norm() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn logdet_scales_with_determinant(seed in 0u64..1000, alpha in 0.1f64..5.0, phase in 0.0f64..std::f64::consts::TAU) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 3;
            let mut q = random_matrix(&mut rng, m);
            for i in 0..m { q.set(i, i, q.get(i, i) + c(2.0, 0.0)); }
            let a = Complex64::from_polar(alpha, phase);
            let lhs = logdet_qqh(&q.scaled(a)).unwrap();
            let rhs = logdet_qqh(&q).unwrap() + 2.0 * m as f64 * alpha.ln();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn weighted_scm_is_linear_in_weights(seed in 0u64..1000, a in 0.0f64..0.5, b in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, m) = (5, 3);
            let xs: Vec<Complex64> = (0..t * m).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let w1: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let w2: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..1.0)).collect();
            let mix: Vec<f64> = w1.iter().zip(&w2).map(|(p, q)| a * p + b * q).collect();
            let mut expect = weighted_scm(&xs, &w1, m).unwrap();
            expect.scale(a);
            expect.add_scaled(&weighted_scm(&xs, &w2, m).unwrap(), b);
            let got = weighted_scm(&xs, &mix, m).unwrap();
            for i in 0..m { for j in 0..m {
                prop_assert!((got.get(i, j) - expect.get(i, j)).norm() < 1e-12);
            }}
        }

        #[test]
        fn cholesky_reconstructs(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_psd(&mut rng, 4).ridged();
            let l = cholesky(&h).unwrap();
            let back = HermitianMatrix::from_lower(&l.matmul(&l.adjoint()));
            prop_assert!(rel_frob(&back.to_full(), &h.to_full()) < 1e-10);
            // Factorizing the reconstruction gives the same factor.
            let l2 = cholesky(&back).unwrap();
            prop_assert!(rel_frob(&l2, &l) < 1e-8);
        }
    }
}
