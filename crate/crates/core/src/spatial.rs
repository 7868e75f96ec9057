//! Jointly-diagonalizable spatial model.
//!
//! Each source image covariance is `H_nf = Q_f⁻¹ diag(g_n) Q_f⁻ᴴ`, with one
//! diagonalizer `Q_f` per frequency shared by all sources and one gain
//! vector `g_n` per source shared by all frequencies. Rows of `Q_f` are the
//! conjugated demixing vectors `q_fmᴴ`.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};
use crate::container::Container;
use crate::dsp::ComplexSpectrogram;
use crate::linalg::{cholesky, cholesky_logdet, cholesky_solve_vec, CMatrix, HermitianMatrix, LinalgError};

/// Floor applied to gains, PSDs and Hermitian forms.
pub const EPS: f64 = 1e-12;

/// Smallest `|det Q_f|` accepted after an update.
pub const MIN_ABS_DET: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpatialError {
    #[error("degenerate ISS update at frequency {f}, channel {m}: hermitian form {value:e}")]
    DegenerateIss { f: usize, m: usize, value: f64 },
    #[error("diagonalizer is singular at frequency {f}")]
    Singular { f: usize },
    #[error("mixture covariance is singular at frequency {f}, frame {t}")]
    SingularCovariance { f: usize, t: usize },
    #[error("nonpositive mixture PSD at frequency {f}, frame {t}, channel {m}")]
    NonPositivePsd { f: usize, t: usize, m: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

fn shape_err(msg: impl Into<String>) -> SpatialError {
    SpatialError::Shape(msg.into())
}

/// Per-frequency diagonalizers `Q_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagonalizer {
    qs: Vec<CMatrix>,
}

impl Diagonalizer {
    pub fn identity(bins: usize, channels: usize) -> Self {
        Self { qs: vec![CMatrix::identity(channels); bins] }
    }

    /// Fails if the matrices differ in size or any is (numerically) singular.
    pub fn new(qs: Vec<CMatrix>) -> Result<Self, SpatialError> {
        if let Some(first) = qs.first() {
            if qs.iter().any(|q| q.dim() != first.dim()) {
                return Err(shape_err("diagonalizers differ in size"));
            }
        }
        for (f, q) in qs.iter().enumerate() {
            check_nonsingular(q, f)?;
        }
        Ok(Self { qs })
    }

    pub fn bins(&self) -> usize {
        self.qs.len()
    }

    pub fn channels(&self) -> usize {
        self.qs.first().map_or(0, CMatrix::dim)
    }

    pub fn get(&self, f: usize) -> &CMatrix {
        &self.qs[f]
    }

    pub fn set(&mut self, f: usize, q: CMatrix) -> Result<(), SpatialError> {
        if q.dim() != self.channels() {
            return Err(shape_err(format!("expected {0}x{0}, got {1}x{1}", self.channels(), q.dim())));
        }
        check_nonsingular(&q, f)?;
        self.qs[f] = q;
        Ok(())
    }

    pub fn matrices(&self) -> &[CMatrix] {
        &self.qs
    }

    /// `Σ_f ln |det(Q_f Q_fᴴ)|`.
    pub fn logdet_sum(&self) -> Result<f64, SpatialError> {
        self.qs.iter().enumerate().try_fold(0.0, |acc, (f, q)| {
            Ok(acc + 2.0 * q.logabsdet().map_err(|_| SpatialError::Singular { f })?)
        })
    }

    pub fn inverses(&self) -> Result<Vec<CMatrix>, SpatialError> {
        self.qs.iter().enumerate().map(|(f, q)| q.inverse().map_err(|_| SpatialError::Singular { f })).collect()
    }
}

fn check_nonsingular(q: &CMatrix, f: usize) -> Result<(), SpatialError> {
    match q.logabsdet() {
        Ok(l) if l.is_finite() && l > MIN_ABS_DET.ln() => Ok(()),
        _ => Err(SpatialError::Singular { f }),
    }
}

/// Frequency-shared nonnegative gains, one M-vector per source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceGains {
    g: Vec<Vec<f64>>,
}

impl SourceGains {
    /// Entries below [`EPS`] are floored; negative or non-finite entries are
    /// rejected.
    pub fn new(g: Vec<Vec<f64>>) -> Result<Self, SpatialError> {
        let m = g.first().map_or(0, Vec::len);
        if g.iter().any(|v| v.len() != m) {
            return Err(shape_err("gain vectors differ in length"));
        }
        let mut g = g;
        for v in g.iter_mut().flatten() {
            if !v.is_finite() || *v < 0.0 {
                return Err(SpatialError::Invalid(format!("gain {v}")));
            }
            *v = v.max(EPS);
        }
        Ok(Self { g })
    }

    pub fn sources(&self) -> usize {
        self.g.len()
    }

    pub fn channels(&self) -> usize {
        self.g.first().map_or(0, Vec::len)
    }

    pub fn get(&self, n: usize) -> &[f64] {
        &self.g[n]
    }

    pub fn as_rows(&self) -> &[Vec<f64>] {
        &self.g
    }

    /// Copy with every `g_n` rescaled to `‖g_n‖₁ / M = 1`, plus the factors
    /// that were divided out (multiply them into `λ_n` to keep the model).
    pub fn normalized(&self) -> (Self, Vec<f64>) {
        let mut scales = Vec::with_capacity(self.g.len());
        let g = self
            .g
            .iter()
            .map(|v| {
                let s = v.iter().sum::<f64>() / v.len() as f64;
                scales.push(s);
                v.iter().map(|x| (x / s).max(EPS)).collect()
            })
            .collect();
        (Self { g }, scales)
    }
}

/// Source power spectral densities `λ_nft`, stored `[n][f][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePsd {
    sources: usize,
    bins: usize,
    frames: usize,
    data: Vec<f64>,
}

impl SourcePsd {
    /// Entries below [`EPS`] are floored; negative or non-finite entries are
    /// rejected.
    pub fn new(sources: usize, bins: usize, frames: usize, mut data: Vec<f64>) -> Result<Self, SpatialError> {
        if data.len() != sources * bins * frames {
            return Err(shape_err(format!("{} values for {sources}x{bins}x{frames}", data.len())));
        }
        for v in &mut data {
            if !v.is_finite() || *v < 0.0 {
                return Err(SpatialError::Invalid(format!("psd {v}")));
            }
            *v = v.max(EPS);
        }
        Ok(Self { sources, bins, frames, data })
    }

    pub fn from_fn(sources: usize, bins: usize, frames: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self, SpatialError> {
        let mut data = Vec::with_capacity(sources * bins * frames);
        for n in 0..sources {
            for b in 0..bins {
                for t in 0..frames {
                    data.push(f(n, b, t));
                }
            }
        }
        Self::new(sources, bins, frames, data)
    }

    /// `(N, F, T)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.sources, self.bins, self.frames)
    }

    #[inline]
    pub fn get(&self, n: usize, f: usize, t: usize) -> f64 {
        self.data[(n * self.bins + f) * self.frames + t]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Multiplies source `n` by `s`, flooring at [`EPS`].
    pub fn scale_source(&mut self, n: usize, s: f64) {
        let len = self.bins * self.frames;
        for v in &mut self.data[n * len..(n + 1) * len] {
            *v = (*v * s).max(EPS);
        }
    }
}

/// One sweep of iterative source steering over `m = 0..M`.
///
/// `u[m]` is the weighted covariance driving row `m`. `f` only labels
/// errors. After the sweep every row satisfies `q_mᴴ U_m q_m = 1` at the
/// moment it was updated.
pub fn iss_sweep(q: &CMatrix, u: &[HermitianMatrix], f: usize) -> Result<CMatrix, SpatialError> {
    let m_dim = q.dim();
    if u.len() != m_dim || u.iter().any(|h| h.dim() != m_dim) {
        return Err(shape_err(format!("need {m_dim} covariances of size {m_dim}")));
    }
    let mut q = q.clone();
    let mut v = vec![Complex64::new(0.0, 0.0); m_dim];
    for m in 0..m_dim {
        let qm: Vec<Complex64> = q.row(m).iter().map(|c| c.conj()).collect();
        for (mp, vp) in v.iter_mut().enumerate() {
            let den = u[mp].quad(&qm);
            if !(den > EPS) {
                return Err(SpatialError::DegenerateIss { f, m: mp, value: den });
            }
            *vp = if mp == m {
                Complex64::new(1.0 - den.sqrt().recip(), 0.0)
            } else {
                let qmp: Vec<Complex64> = q.row(mp).iter().map(|c| c.conj()).collect();
                u[mp].form(&qmp, &qm) / den
            };
        }
        let row_m = q.row(m).to_vec();
        for (mp, vp) in v.iter().enumerate() {
            for (dst, src) in q.row_mut(mp).iter_mut().zip(&row_m) {
                *dst -= vp * src;
            }
        }
    }
    check_nonsingular(&q, f)?;
    Ok(q)
}

/// `Σ_m q_mᴴ U_m q_m − ln |det(Q Qᴴ)|`, the objective an ISS sweep decreases.
pub fn iss_surrogate(q: &CMatrix, u: &[HermitianMatrix]) -> Result<f64, LinalgError> {
    let forms: f64 = (0..q.dim())
        .map(|m| {
            let qm: Vec<Complex64> = q.row(m).iter().map(|c| c.conj()).collect();
            u[m].quad(&qm)
        })
        .sum();
    Ok(forms - 2.0 * q.logabsdet()?)
}

/// `H_n = Q⁻¹ diag(g_n) Q⁻ᴴ`.
pub fn jd_scm(q: &CMatrix, g: &[f64]) -> Result<HermitianMatrix, SpatialError> {
    if g.len() != q.dim() {
        return Err(shape_err(format!("{} gains for {} channels", g.len(), q.dim())));
    }
    let inv = q.inverse().map_err(|_| SpatialError::Singular { f: 0 })?;
    Ok(jd_scm_from_inverse(&inv, g))
}

fn jd_scm_from_inverse(inv: &CMatrix, g: &[f64]) -> HermitianMatrix {
    let m = inv.dim();
    let full = CMatrix::from_fn(m, |i, j| (0..m).map(|k| inv.get(i, k) * g[k] * inv.get(j, k).conj()).sum());
    HermitianMatrix::from_lower(&full)
}

/// `H_nf` for every source and frequency, indexed `[n][f]`.
pub fn jd_scms(q: &Diagonalizer, gains: &SourceGains) -> Result<Vec<Vec<HermitianMatrix>>, SpatialError> {
    let invs = q.inverses()?;
    Ok(gains.as_rows().iter().map(|g| invs.iter().map(|inv| jd_scm_from_inverse(inv, g)).collect()).collect())
}

/// Negative log-likelihood of the mixture under the general local Gaussian
/// model, `Σ_{f,t} [M ln π + ln det Σ_ft + x_ftᴴ Σ_ft⁻¹ x_ft]` with
/// `Σ_ft = Σ_n λ_nft H_nf`, ridged. `scms` is indexed `[n][f]`.
pub fn lgm_nll(spec: &ComplexSpectrogram, psd: &SourcePsd, scms: &[Vec<HermitianMatrix>]) -> Result<f64, SpatialError> {
    let (nf, nt, nm) = spec.dims();
    let (ns, pf, pt) = psd.dims();
    if (pf, pt) != (nf, nt) || scms.len() != ns || scms.iter().any(|v| v.len() != nf || v.iter().any(|h| h.dim() != nm)) {
        return Err(shape_err("spectrogram, psd and covariances disagree"));
    }
    let mut total = 0.0;
    for f in 0..nf {
        for t in 0..nt {
            let mut cov = HermitianMatrix::zeros(nm);
            for (n, h) in scms.iter().enumerate() {
                cov.add_scaled(&h[f], psd.get(n, f, t));
            }
            let l = cholesky(&cov.ridged()).map_err(|_| SpatialError::SingularCovariance { f, t })?;
            let x = spec.frame(f, t);
            let z = cholesky_solve_vec(&l, x);
            let quad: f64 = x.iter().zip(&z).map(|(a, b)| (a.conj() * b).re).sum();
            total += nm as f64 * PI.ln() + cholesky_logdet(&l) + quad;
        }
    }
    Ok(total)
}

/// `ỹ_ftm = Σ_n g_nm λ_nft`, laid out `[f][t][m]` like a spectrogram.
pub fn mixture_psd(psd: &SourcePsd, gains: &SourceGains) -> Result<Vec<f64>, SpatialError> {
    let (ns, nf, nt) = psd.dims();
    if gains.sources() != ns {
        return Err(shape_err(format!("{} gain vectors for {ns} sources", gains.sources())));
    }
    let nm = gains.channels();
    let mut y = vec![0.0; nf * nt * nm];
    for n in 0..ns {
        let g = gains.get(n);
        for f in 0..nf {
            for t in 0..nt {
                let lam = psd.get(n, f, t);
                let base = (f * nt + t) * nm;
                for m in 0..nm {
                    y[base + m] += g[m] * lam;
                }
            }
        }
    }
    Ok(y)
}

/// Fast-path negative log-likelihood in the diagonalized domain,
/// `Σ_{f,t,m} [ln ỹ + |x̃|²/ỹ] − T Σ_f ln |det(Q_f Q_fᴴ)|`.
///
/// This omits the `M F T ln π` constant that [`lgm_nll`] includes.
pub fn jd_nll(xt: &ComplexSpectrogram, ytilde: &[f64], q: &Diagonalizer) -> Result<f64, SpatialError> {
    let (nf, nt, nm) = xt.dims();
    if ytilde.len() != nf * nt * nm || q.bins() != nf || q.channels() != nm {
        return Err(shape_err("diagonalized spectrogram, psd and diagonalizer disagree"));
    }
    let mut total = 0.0;
    for (i, (x, &y)) in xt.data().iter().zip(ytilde).enumerate() {
        if !(y > 0.0) {
            let (f, rest) = (i / (nt * nm), i % (nt * nm));
            return Err(SpatialError::NonPositivePsd { f, t: rest / nm, m: rest % nm });
        }
        total += y.ln() + x.norm_sqr() / y;
    }
    Ok(total - nt as f64 * q.logdet_sum()?)
}

/// `x̃_ft = Q_f x_ft`.
pub fn diagonalize(spec: &ComplexSpectrogram, q: &Diagonalizer) -> Result<ComplexSpectrogram, SpatialError> {
    let (nf, nt, nm) = spec.dims();
    if q.bins() != nf || q.channels() != nm {
        return Err(shape_err(format!("diagonalizer is {}x{0}x{0} for spectrogram with F={nf}, M={nm}", q.bins())));
    }
    let mut out = ComplexSpectrogram::zeros(nf, nt, nm);
    for f in 0..nf {
        let qf = q.get(f);
        for t in 0..nt {
            qf.mul_vec_into(spec.frame(f, t), out.frame_mut(f, t));
        }
    }
    Ok(out)
}

/// Output of [`wiener_separate`].
#[derive(Clone, Debug)]
pub struct Separation {
    /// Per-source estimates at the reference channel, each F × T × 1.
    pub sources: Vec<ComplexSpectrogram>,
    /// Per-source multichannel images, each F × T × M, when requested.
    pub images: Option<Vec<ComplexSpectrogram>>,
}

/// Multichannel Wiener filter `ŝ_nft = uᵀ Y_nft Y_ft⁻¹ x_ft` with
/// `Y_nft = λ_nft H_nf`.
///
/// The filter is applied in the diagonalized domain, where it reduces to
/// `Q_f⁻¹ diag(g_n λ_nft / ỹ_ft) Q_f`. The per-channel ratios sum to one
/// because gains and PSDs are floored at [`EPS`], so the estimates add up to
/// the mixture at the reference channel even when `Y_ft` is rank deficient.
/// `reference` is zero-based.
pub fn wiener_separate(
    spec: &ComplexSpectrogram,
    psd: &SourcePsd,
    q: &Diagonalizer,
    gains: &SourceGains,
    reference: usize,
    with_images: bool,
) -> Result<Separation, SpatialError> {
    let (nf, nt, nm) = spec.dims();
    let (ns, pf, pt) = psd.dims();
    if (pf, pt) != (nf, nt) || gains.channels() != nm || gains.sources() != ns {
        return Err(shape_err("spectrogram, psd and gains disagree"));
    }
    if reference >= nm {
        return Err(SpatialError::Invalid(format!("reference channel {reference} with {nm} channels")));
    }
    let xt = diagonalize(spec, q)?;
    let invs = q.inverses()?;
    let ytilde = mixture_psd(psd, gains)?;
    let mut sources = vec![ComplexSpectrogram::zeros(nf, nt, 1); ns];
    let mut images = with_images.then(|| vec![ComplexSpectrogram::zeros(nf, nt, nm); ns]);
    let mut scaled = vec![Complex64::new(0.0, 0.0); nm];
    for f in 0..nf {
        let inv = &invs[f];
        for t in 0..nt {
            let x = xt.frame(f, t);
            let y = &ytilde[(f * nt + t) * nm..(f * nt + t + 1) * nm];
            for n in 0..ns {
                let lam = psd.get(n, f, t);
                for (m, s) in scaled.iter_mut().enumerate() {
                    *s = x[m] * (gains.get(n)[m] * lam / y[m]);
                }
                let est: Complex64 = inv.row(reference).iter().zip(&scaled).map(|(a, b)| a * b).sum();
                sources[n].set(f, t, 0, est);
                if let Some(imgs) = images.as_mut() {
                    inv.mul_vec_into(&scaled, imgs[n].frame_mut(f, t));
                }
            }
        }
    }
    Ok(Separation { sources, images })
}

/// Packs `(Q, g, λ)` into a parameter container. `Q` is stored as
/// `[F, M, M, 2]` (real, imaginary).
pub fn model_to_container(q: &Diagonalizer, gains: &SourceGains, psd: &SourcePsd) -> Container {
    let (nf, nm) = (q.bins(), q.channels());
    let mut qd = Vec::with_capacity(nf * nm * nm * 2);
    for qf in q.matrices() {
        for c in qf.data() {
            qd.extend([c.re, c.im]);
        }
    }
    let (ns, pf, pt) = psd.dims();
    let mut p = ParamStore::new();
    p.insert("Q", Tensor::new(&[nf, nm, nm, 2], qd).expect("Q shape"));
    p.insert("g", Tensor::new(&[gains.sources(), nm], gains.as_rows().concat()).expect("g shape"));
    p.insert("lambda", Tensor::new(&[ns, pf, pt], psd.data().to_vec()).expect("lambda shape"));
    Container::new("spatial-model", p)
}

/// Inverse of [`model_to_container`].
pub fn model_from_container(c: &Container) -> Result<(Diagonalizer, SourceGains, SourcePsd), SpatialError> {
    let get = |name: &str, nd: usize| {
        c.entries
            .by_name(name)
            .filter(|t| t.ndim() == nd)
            .ok_or_else(|| shape_err(format!("missing or malformed entry {name}")))
    };
    let qt = get("Q", 4)?;
    let (nf, nm) = (qt.shape()[0], qt.shape()[1]);
    if qt.shape()[2] != nm || qt.shape()[3] != 2 {
        return Err(shape_err("Q must be [F, M, M, 2]"));
    }
    let qs = qt
        .data()
        .chunks_exact(nm * nm * 2)
        .map(|blk| CMatrix::from_rows(nm, blk.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| shape_err(e.to_string()))?;
    debug_assert_eq!(qs.len(), nf);
    let gt = get("g", 2)?;
    let gains = SourceGains::new(gt.data().chunks_exact(gt.shape()[1]).map(<[f64]>::to_vec).collect())?;
    let lt = get("lambda", 3)?;
    let s = lt.shape();
    let psd = SourcePsd::new(s[0], s[1], s[2], lt.data().to_vec())?;
    Ok((Diagonalizer::new(qs)?, gains, psd))
}
