use num_complex::Complex64;

use crate::autodiff::Tensor;
use crate::dsp::ComplexSpectrogram;

/// Network-side view of one mixture: the spectrogram rescaled to unit mean
/// power and rearranged to `[F, M, T]`, the outer products needed for the
/// weighted covariances, and the block-0 input features.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub bins: usize,
    pub channels: usize,
    pub frames: usize,
    /// Mixture divided by this factor.
    pub scale: f64,
    pub x_re: Tensor,
    pub x_im: Tensor,
    /// `x_fti · conj(x_ftj)` as `[F, T, M·M]`.
    pub xx_re: Tensor,
    pub xx_im: Tensor,
    /// Normalized log power `[F·M, T]` stacked over inter-channel phase
    /// differences to channel 0 as cos/sin pairs `[2·F·(M−1), T]`.
    pub features: Tensor,
}

/// Floor inside the log-power features.
pub(crate) const LOG_FLOOR: f64 = 1e-8;

impl PreparedInput {
    pub fn new(spec: &ComplexSpectrogram) -> Self {
        let (nf, nt, nm) = spec.dims();
        let mean_power = spec.energy() / (nf * nt * nm).max(1) as f64;
        let scale = if mean_power > 0.0 { mean_power.sqrt() } else { 1.0 };
        let at = |f: usize, m: usize, t: usize| spec.get(f, t, m) / scale;

        let mut x_re = vec![0.0; nf * nm * nt];
        let mut x_im = vec![0.0; nf * nm * nt];
        for f in 0..nf {
            for m in 0..nm {
                for t in 0..nt {
                    let v = at(f, m, t);
                    x_re[(f * nm + m) * nt + t] = v.re;
                    x_im[(f * nm + m) * nt + t] = v.im;
                }
            }
        }

        let mut xx_re = vec![0.0; nf * nt * nm * nm];
        let mut xx_im = vec![0.0; nf * nt * nm * nm];
        for f in 0..nf {
            for t in 0..nt {
                let x = spec.frame(f, t);
                let base = (f * nt + t) * nm * nm;
                for i in 0..nm {
                    for j in 0..nm {
                        let v = x[i] * x[j].conj() / (scale * scale);
                        xx_re[base + i * nm + j] = v.re;
                        xx_im[base + i * nm + j] = v.im;
                    }
                }
            }
        }

        let log_power: Vec<f64> = x_re.iter().zip(&x_im).map(|(r, i)| (r * r + i * i + LOG_FLOOR).ln()).collect();
        let mut features = standardize(&log_power);
        for m in 1..nm {
            for part in 0..2 {
                for f in 0..nf {
                    for t in 0..nt {
                        let d = at(f, m, t) * at(f, 0, t).conj();
                        let unit = if d.norm() > 1e-12 { d / d.norm() } else { Complex64::new(1.0, 0.0) };
                        features.push(if part == 0 { unit.re } else { unit.im });
                    }
                }
            }
        }
        let feat_rows = nf * nm + 2 * nf * (nm - 1);

        Self {
            bins: nf,
            channels: nm,
            frames: nt,
            scale,
            x_re: Tensor::new(&[nf, nm, nt], x_re).expect("x shape"),
            x_im: Tensor::new(&[nf, nm, nt], x_im).expect("x shape"),
            xx_re: Tensor::new(&[nf, nt, nm * nm], xx_re).expect("xx shape"),
            xx_im: Tensor::new(&[nf, nt, nm * nm], xx_im).expect("xx shape"),
            features: Tensor::new(&[feat_rows, nt], features).expect("feature shape"),
        }
    }
}

/// Zero mean, unit variance over all entries (unit variance skipped for
/// constant input).
pub(crate) fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = (var + INSTANCE_NORM_EPS).sqrt();
    v.iter().map(|x| (x - mean) / std).collect()
}

pub(crate) const INSTANCE_NORM_EPS: f64 = 1e-5;
