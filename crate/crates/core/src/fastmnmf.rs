//! FastMNMF: low-rank NMF source model on top of the jointly-diagonalizable
//! spatial model.
//!
//! With `p_ftm = |x̃_ftm|²` and `ỹ_ftm = Σ_n g_nm λ_nft`,
//! `λ_nft = Σ_k W_nfk H_nkt`, one iteration performs, recomputing `ỹ`
//! before each step:
//!
//! ```text
//! W_nfk ← W_nfk · sqrt( Σ_t H_nkt Σ_m g_nm p/ỹ²  /  Σ_t H_nkt Σ_m g_nm/ỹ )
//! H_nkt ← H_nkt · sqrt( Σ_f W_nfk Σ_m g_nm p/ỹ²  /  Σ_f W_nfk Σ_m g_nm/ỹ )
//! g_nm  ← g_nm  · sqrt( Σ_ft λ_nft p/ỹ²         /  Σ_ft λ_nft/ỹ )
//! Q_f   ← iss_sweep(Q_f, U_fm = (1/T) Σ_t x_ft x_ftᴴ / ỹ_ftm)
//! ```
//!
//! followed by rescaling `g_n` to unit mean (into `W_n`) and the columns of
//! `W_n` to unit ℓ1 norm over frequency (into `H_n`). Each step is a
//! majorize-minimize update of the negative log-likelihood, so the sequence
//! of NLL values is non-increasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsp::ComplexSpectrogram;
use crate::linalg::{weighted_covariance, HermitianMatrix};
use crate::spatial::{self, Diagonalizer, Separation, SourceGains, SourcePsd, SpatialError, EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FastMnmfError {
    #[error("non-finite update of {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Model state. `w` is laid out `[n][f][k]`, `h` is `[n][k][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NmfParams {
    pub sources: usize,
    pub bases: usize,
    pub bins: usize,
    pub frames: usize,
    pub w: Vec<f64>,
    pub h: Vec<f64>,
    pub gains: SourceGains,
    pub q: Diagonalizer,
}

/// `Q = I`, `W` and `H` uniform on `[0.1, 1)`, and `g_n` peaked at channel
/// `n mod M` (value 1) over a uniform `[0, 0.1)` background, then normalized.
pub fn fastmnmf_init(spec: &ComplexSpectrogram, sources: usize, bases: usize, seed: u64) -> Result<NmfParams, FastMnmfError> {
    if sources == 0 || bases == 0 {
        return Err(FastMnmfError::Config(format!("need at least one source and basis, got N={sources}, K={bases}")));
    }
    let (nf, nt, nm) = spec.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..sources * nf * bases).map(|_| rng.random_range(0.1..1.0)).collect();
    let h = (0..sources * bases * nt).map(|_| rng.random_range(0.1..1.0)).collect();
    let g = (0..sources)
        .map(|n| (0..nm).map(|m| if m == n % nm { 1.0 } else { rng.random_range(0.0..0.1) }).collect())
        .collect();
    let mut p = NmfParams {
        sources,
        bases,
        bins: nf,
        frames: nt,
        w,
        h,
        gains: SourceGains::new(g)?,
        q: Diagonalizer::identity(nf, nm),
    };
    p.normalize();
    Ok(p)
}

impl NmfParams {
    pub fn channels(&self) -> usize {
        self.q.channels()
    }

    /// `λ_nft`.
    pub fn psd(&self) -> SourcePsd {
        let data = self.psd_raw();
        SourcePsd::new(self.sources, self.bins, self.frames, data).expect("nonnegative psd")
    }

    fn psd_raw(&self) -> Vec<f64> {
        let (nf, nt, nk) = (self.bins, self.frames, self.bases);
        let mut lam = vec![0.0; self.sources * nf * nt];
        for n in 0..self.sources {
            for f in 0..nf {
                let out = &mut lam[(n * nf + f) * nt..(n * nf + f + 1) * nt];
                for k in 0..nk {
                    let wv = self.w[(n * nf + f) * nk + k];
                    let hr = &self.h[(n * nk + k) * nt..(n * nk + k + 1) * nt];
                    for (o, hv) in out.iter_mut().zip(hr) {
                        *o += wv * hv;
                    }
                }
                for o in out.iter_mut() {
                    *o = o.max(EPS);
                }
            }
        }
        lam
    }

    fn mixture(&self, lam: &[f64]) -> Vec<f64> {
        let (nf, nt, nm) = (self.bins, self.frames, self.channels());
        let mut y = vec![0.0; nf * nt * nm];
        for n in 0..self.sources {
            let g = self.gains.get(n);
            for (i, &l) in lam[n * nf * nt..(n + 1) * nf * nt].iter().enumerate() {
                for (yv, gv) in y[i * nm..(i + 1) * nm].iter_mut().zip(g) {
                    *yv += gv * l;
                }
            }
        }
        y
    }

    /// Per-source `A_nft = Σ_m g_nm p/ỹ²` and `B_nft = Σ_m g_nm/ỹ`.
    fn source_weights(&self, power: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nm = self.channels();
        let ft = self.bins * self.frames;
        let mut a = vec![0.0; self.sources * ft];
        let mut b = vec![0.0; self.sources * ft];
        for i in 0..ft {
            let (p, yy) = (&power[i * nm..(i + 1) * nm], &y[i * nm..(i + 1) * nm]);
            for n in 0..self.sources {
                let g = self.gains.get(n);
                let (mut sa, mut sb) = (0.0, 0.0);
                for m in 0..nm {
                    let inv = 1.0 / yy[m];
                    sa += g[m] * p[m] * inv * inv;
                    sb += g[m] * inv;
                }
                a[n * ft + i] = sa;
                b[n * ft + i] = sb;
            }
        }
        (a, b)
    }

    fn update_w(&mut self, power: &[f64]) -> Result<(), FastMnmfError> {
        let y = self.mixture(&self.psd_raw());
        let (a, b) = self.source_weights(power, &y);
        let (nf, nt, nk) = (self.bins, self.frames, self.bases);
        for n in 0..self.sources {
            for f in 0..nf {
                let ar = &a[(n * nf + f) * nt..(n * nf + f + 1) * nt];
                let br = &b[(n * nf + f) * nt..(n * nf + f + 1) * nt];
                for k in 0..nk {
                    let hr = &self.h[(n * nk + k) * nt..(n * nk + k + 1) * nt];
                    let (num, den) = dot2(hr, ar, br);
                    let wv = &mut self.w[(n * nf + f) * nk + k];
                    *wv = mu_step(*wv, num, den);
                }
            }
        }
        check_finite(&self.w, "W")
    }

    fn update_h(&mut self, power: &[f64]) -> Result<(), FastMnmfError> {
        let y = self.mixture(&self.psd_raw());
        let (a, b) = self.source_weights(power, &y);
        let (nf, nt, nk) = (self.bins, self.frames, self.bases);
        let mut num = vec![0.0; nt];
        let mut den = vec![0.0; nt];
        for n in 0..self.sources {
            for k in 0..nk {
                num.iter_mut().for_each(|v| *v = 0.0);
                den.iter_mut().for_each(|v| *v = 0.0);
                for f in 0..nf {
                    let wv = self.w[(n * nf + f) * nk + k];
                    let ar = &a[(n * nf + f) * nt..(n * nf + f + 1) * nt];
                    let br = &b[(n * nf + f) * nt..(n * nf + f + 1) * nt];
                    for t in 0..nt {
                        num[t] += wv * ar[t];
                        den[t] += wv * br[t];
                    }
                }
                let hr = &mut self.h[(n * nk + k) * nt..(n * nk + k + 1) * nt];
                for t in 0..nt {
                    hr[t] = mu_step(hr[t], num[t], den[t]);
                }
            }
        }
        check_finite(&self.h, "H")
    }

    fn update_g(&mut self, power: &[f64]) -> Result<(), FastMnmfError> {
        let lam = self.psd_raw();
        let y = self.mixture(&lam);
        let nm = self.channels();
        let ft = self.bins * self.frames;
        let mut rows = self.gains.as_rows().to_vec();
        for (n, g) in rows.iter_mut().enumerate() {
            let mut num = vec![0.0; nm];
            let mut den = vec![0.0; nm];
            for i in 0..ft {
                let l = lam[n * ft + i];
                for m in 0..nm {
                    let inv = 1.0 / y[i * nm + m];
                    num[m] += l * power[i * nm + m] * inv * inv;
                    den[m] += l * inv;
                }
            }
            for m in 0..nm {
                g[m] = mu_step(g[m], num[m], den[m]);
            }
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FastMnmfError::NonFinite("g"));
        }
        self.gains = SourceGains::new(rows)?;
        Ok(())
    }

    /// One ISS sweep per frequency. Bins whose weighted covariances vanish
    /// (silent input) keep their diagonalizer.
    fn update_q(&mut self, spec: &ComplexSpectrogram) -> Result<(), FastMnmfError> {
        let y = self.mixture(&self.psd_raw());
        let (nf, nt, nm) = spec.dims();
        let mut weights = vec![0.0; nt];
        for f in 0..nf {
            let frames = spec.bin(f);
            let u: Vec<HermitianMatrix> = (0..nm)
                .map(|m| {
                    for (t, w) in weights.iter_mut().enumerate() {
                        *w = 1.0 / y[(f * nt + t) * nm + m];
                    }
                    weighted_covariance(frames, &weights, nm).expect("frame layout")
                })
                .collect();
            match spatial::iss_sweep(self.q.get(f), &u, f) {
                Ok(q) => {
                    if !q.is_finite() {
                        return Err(FastMnmfError::NonFinite("Q"));
                    }
                    self.q.set(f, q)?;
                }
                Err(SpatialError::DegenerateIss { .. }) if u.iter().any(|h| h.trace() <= EPS) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Rescales `g_n` to unit mean and the `W_n` columns to unit ℓ1 norm,
    /// leaving `ỹ` unchanged.
    fn normalize(&mut self) {
        let (gn, scales) = self.gains.normalized();
        self.gains = gn;
        let (nf, nt, nk) = (self.bins, self.frames, self.bases);
        for (n, s) in scales.into_iter().enumerate() {
            for v in &mut self.w[n * nf * nk..(n + 1) * nf * nk] {
                *v = (*v * s).max(EPS);
            }
            for k in 0..nk {
                let norm: f64 = (0..nf).map(|f| self.w[(n * nf + f) * nk + k]).sum();
                for f in 0..nf {
                    let v = &mut self.w[(n * nf + f) * nk + k];
                    *v = (*v / norm).max(EPS);
                }
                for v in &mut self.h[(n * nk + k) * nt..(n * nk + k + 1) * nt] {
                    *v = (*v * norm).max(EPS);
                }
            }
        }
    }

    /// Negative log-likelihood in the diagonalized domain, without the
    /// `M F T ln π` constant.
    pub fn nll(&self, spec: &ComplexSpectrogram) -> Result<f64, FastMnmfError> {
        let xt = spatial::diagonalize(spec, &self.q)?;
        let y = self.mixture(&self.psd_raw());
        Ok(spatial::jd_nll(&xt, &y, &self.q)?)
    }

    fn check_dims(&self, spec: &ComplexSpectrogram) -> Result<(), FastMnmfError> {
        if spec.dims() != (self.bins, self.frames, self.channels()) {
            return Err(SpatialError::Shape(format!("spectrogram {:?} for model {:?}", spec.dims(), (self.bins, self.frames, self.channels()))).into());
        }
        Ok(())
    }
}

fn dot2(h: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    h.iter().zip(a.iter().zip(b)).fold((0.0, 0.0), |(sa, sb), (hv, (av, bv))| (sa + hv * av, sb + hv * bv))
}

#[inline]
fn mu_step(x: f64, num: f64, den: f64) -> f64 {
    if den > 0.0 {
        (x * (num / den).sqrt()).max(EPS)
    } else {
        x
    }
}

fn check_finite(v: &[f64], name: &'static str) -> Result<(), FastMnmfError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(FastMnmfError::NonFinite(name))
    }
}

fn power(spec: &ComplexSpectrogram, q: &Diagonalizer) -> Result<Vec<f64>, FastMnmfError> {
    Ok(spatial::diagonalize(spec, q)?.data().iter().map(|c| c.norm_sqr()).collect())
}

/// One full iteration: W, H and g updates, one ISS sweep, normalization.
pub fn fastmnmf_iterate(params: &mut NmfParams, spec: &ComplexSpectrogram) -> Result<(), FastMnmfError> {
    params.check_dims(spec)?;
    let p = power(spec, &params.q)?;
    params.update_w(&p)?;
    params.update_h(&p)?;
    params.update_g(&p)?;
    params.update_q(spec)?;
    params.normalize();
    Ok(())
}

/// Runs `iterations` iterations and returns the NLL before the first and
/// after every iteration.
pub fn fastmnmf_fit(params: &mut NmfParams, spec: &ComplexSpectrogram, iterations: usize) -> Result<Vec<f64>, FastMnmfError> {
    let mut history = Vec::with_capacity(iterations + 1);
    history.push(params.nll(spec)?);
    for _ in 0..iterations {
        fastmnmf_iterate(params, spec)?;
        history.push(params.nll(spec)?);
    }
    Ok(history)
}

/// Wiener separation with the fitted model. `reference` is zero-based.
pub fn fastmnmf_separate(params: &NmfParams, spec: &ComplexSpectrogram, reference: usize) -> Result<Separation, FastMnmfError> {
    params.check_dims(spec)?;
    Ok(spatial::wiener_separate(spec, &params.psd(), &params.q, &params.gains, reference, false)?)
}

#[cfg(test)]
mod tests {
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::linalg::CMatrix;

    fn cgauss(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
        let s = (var / 2.0).sqrt();
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re * s, im * s)
    }

    /// Two sources with random steering vectors and log-normal PSDs.
    fn instantaneous_mixture(seed: u64, nf: usize, nt: usize, nm: usize) -> ComplexSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steer: Vec<Vec<Complex64>> = (0..2 * nf).map(|_| (0..nm).map(|_| cgauss(&mut rng, 1.0)).collect()).collect();
        let mut spec = ComplexSpectrogram::zeros(nf, nt, nm);
        for f in 0..nf {
            for t in 0..nt {
                for n in 0..2 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let var = (2.0 * z).exp();
                    let s = cgauss(&mut rng, var);
                    for m in 0..nm {
                        let v = spec.get(f, t, m) + steer[n * nf + f][m] * s + cgauss(&mut rng, 1e-3);
                        spec.set(f, t, m, v);
                    }
                }
            }
        }
        spec
    }

    #[test]
    fn init_is_identity_and_deterministic() {
        let spec = instantaneous_mixture(1, 5, 6, 3);
        let a = fastmnmf_init(&spec, 2, 3, 9).unwrap();
        let b = fastmnmf_init(&spec, 2, 3, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.q.matrices().iter().all(|q| *q == CMatrix::identity(3)));
        assert!(fastmnmf_init(&spec, 0, 3, 9).is_err());
    }

    /// Rank of a real matrix by Gaussian elimination with a relative
    /// threshold.
    fn rank(mut a: Vec<Vec<f64>>) -> usize {
        let (rows, cols) = (a.len(), a[0].len());
        let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut r = 0;
        for c in 0..cols {
            let Some(p) = (r..rows).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())) else { break };
            if a[p][c].abs() <= 1e-9 * scale {
                continue;
            }
            a.swap(r, p);
            for i in r + 1..rows {
                let f = a[i][c] / a[r][c];
                for j in c..cols {
                    a[i][j] -= f * a[r][j];
                }
            }
            r += 1;
        }
        r
    }

    #[test]
    fn single_source_psd_has_bounded_rank() {
        let spec = instantaneous_mixture(2, 8, 9, 2);
        let p = fastmnmf_init(&spec, 1, 2, 3).unwrap();
        let lam = p.psd();
        let m: Vec<Vec<f64>> = (0..8).map(|f| (0..9).map(|t| lam.get(0, f, t)).collect()).collect();
        assert!(rank(m) <= 2);
    }

    #[test]
    fn nll_is_monotone() {
        for seed in 0..3 {
            let spec = instantaneous_mixture(10 + seed, 12, 40, 3);
            let mut p = fastmnmf_init(&spec, 2, 3, seed).unwrap();
            let hist = fastmnmf_fit(&mut p, &spec, 30).unwrap();
            for w in hist.windows(2) {
                assert!(w[1] <= w[0] + 1e-6 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
            assert!(hist.last().unwrap() < &hist[0]);
        }
    }

    #[test]
    fn zero_input_stays_finite() {
        let spec = ComplexSpectrogram::zeros(4, 5, 2);
        let mut p = fastmnmf_init(&spec, 2, 2, 0).unwrap();
        for _ in 0..5 {
            fastmnmf_iterate(&mut p, &spec).unwrap();
        }
        assert!(p.w.iter().chain(&p.h).all(|v| v.is_finite() && *v >= EPS));
        assert!(p.psd().data().iter().all(|&v| v >= EPS && v.is_finite()));
    }

    #[test]
    fn separation_conserves_and_passes_through() {
        let spec = instantaneous_mixture(3, 6, 10, 3);
        let mut p = fastmnmf_init(&spec, 2, 2, 1).unwrap();
        fastmnmf_fit(&mut p, &spec, 5).unwrap();
        let sep = fastmnmf_separate(&p, &spec, 0).unwrap();
        for f in 0..6 {
            for t in 0..10 {
                let sum = sep.sources[0].get(f, t, 0) + sep.sources[1].get(f, t, 0);
                let x = spec.get(f, t, 0);
                assert!((sum - x).norm() <= 1e-8 * x.norm());
            }
        }
        let one = fastmnmf_init(&spec, 1, 2, 1).unwrap();
        let sep = fastmnmf_separate(&one, &spec, 2).unwrap();
        assert!(sep.sources[0].data().iter().zip(spec.channel(2).data()).all(|(a, b)| (a - b).norm() < 1e-12 * (1.0 + b.norm())));
    }

    #[test]
    fn normalization_keeps_likelihood() {
        let spec = instantaneous_mixture(4, 6, 8, 2);
        let mut p = fastmnmf_init(&spec, 2, 3, 5).unwrap();
        for v in p.w.iter_mut() {
            *v *= 3.0;
        }
        let before = p.nll(&spec).unwrap();
        p.normalize();
        let after = p.nll(&spec).unwrap();
        assert!(((before - after) / before).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn relabeling_sources_keeps_nll(seed in 0u64..1000) {
            let spec = instantaneous_mixture(seed, 5, 7, 2);
            let p = fastmnmf_init(&spec, 2, 2, seed).unwrap();
            let (nf, nt, nk) = (p.bins, p.frames, p.bases);
            let mut swapped = p.clone();
            swapped.w = [&p.w[nf * nk..], &p.w[..nf * nk]].concat();
            swapped.h = [&p.h[nk * nt..], &p.h[..nk * nt]].concat();
            swapped.gains = SourceGains::new(vec![p.gains.get(1).to_vec(), p.gains.get(0).to_vec()]).unwrap();
            let (a, b) = (p.nll(&spec).unwrap(), swapped.nll(&spec).unwrap());
            prop_assert!(((a - b) / a).abs() < 1e-12);
        }
    }
}
