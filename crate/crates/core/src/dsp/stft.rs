use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use super::{ComplexSpectrogram, DspError, MultichannelWave};

/// Window and hop lengths in samples.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
}

impl StftParams {
    pub fn new(window: usize, hop: usize) -> Result<Self, DspError> {
        if window < 2 || !window.is_power_of_two() {
            return Err(DspError::InvalidParams(format!("window {window} is not a power of two")));
        }
        if hop == 0 || window % hop != 0 {
            return Err(DspError::InvalidParams(format!("hop {hop} does not divide window {window}")));
        }
        Ok(Self { window, hop })
    }

    /// Number of onesided frequency bins.
    pub fn bins(&self) -> usize {
        self.window / 2 + 1
    }

    /// Zeros prepended by [`stft_padded`].
    pub fn edge_pad(&self) -> usize {
        self.window - self.hop
    }

    /// Frame count produced by [`stft_padded`] for a signal of `len` samples.
    pub fn padded_frames(&self, len: usize) -> usize {
        let total = self.padded_len(len);
        num_frames(total, self.window, self.hop)
    }

    fn padded_len(&self, len: usize) -> usize {
        let base = (len + 2 * self.edge_pad()).max(self.window);
        let rem = (base - self.window) % self.hop;
        base + if rem == 0 { 0 } else { self.hop - rem }
    }
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// `floor((len - window) / hop) + 1`; zero when `len < window`.
pub fn num_frames(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Onesided Hann-windowed STFT without edge padding: frame `t` covers samples
/// `[t·hop, t·hop + window)`.
pub fn stft(wave: &MultichannelWave, window: usize, hop: usize) -> Result<ComplexSpectrogram, DspError> {
    let p = StftParams::new(window, hop)?;
    if wave.len() < window {
        return Err(DspError::TooShort { len: wave.len(), window });
    }
    Ok(analyze(wave.channels(), p))
}

/// STFT of the signal zero-padded by `window - hop` samples at both ends (and
/// up to `hop - 1` more at the end so the last frame is complete). Every
/// original sample then lies in the fully-overlapped region.
pub fn stft_padded(wave: &MultichannelWave, params: StftParams) -> Result<ComplexSpectrogram, DspError> {
    let p = StftParams::new(params.window, params.hop)?;
    if wave.is_empty() {
        return Err(DspError::TooShort { len: 0, window: p.window });
    }
    let total = p.padded_len(wave.len());
    let pad = p.edge_pad();
    let chans: Vec<Vec<f64>> = wave
        .channels()
        .iter()
        .map(|c| {
            let mut v = vec![0.0; total];
            v[pad..pad + c.len()].copy_from_slice(c);
            v
        })
        .collect();
    Ok(analyze(&chans, p))
}

fn analyze(channels: &[Vec<f64>], p: StftParams) -> ComplexSpectrogram {
    let n = p.window;
    let bins = p.bins();
    let frames = num_frames(channels[0].len(), n, p.hop);
    let m = channels.len();
    let win = hann_window(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = ComplexSpectrogram::zeros(bins, frames, m);
    for (c, ch) in channels.iter().enumerate() {
        for t in 0..frames {
            let start = t * p.hop;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(ch[start + k] * win[k], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (f, v) in buf.iter().take(bins).enumerate() {
                out.set(f, t, c, *v);
            }
        }
    }
    out
}

/// Weighted overlap-add inverse of [`stft`]. Output length is
/// `(T - 1)·hop + window`; samples are normalized by the accumulated squared
/// window, so reconstruction is exact wherever that sum is nonzero.
pub fn istft(
    spec: &ComplexSpectrogram,
    window: usize,
    hop: usize,
    sample_rate: u32,
) -> Result<MultichannelWave, DspError> {
    let p = StftParams::new(window, hop)?;
    if spec.bins() != p.bins() {
        return Err(DspError::BinMismatch { window, expected: p.bins(), got: spec.bins() });
    }
    let (_, frames, m) = spec.dims();
    let n = window;
    let len = if frames == 0 { 0 } else { (frames - 1) * hop + n };
    let win = hann_window(n);
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut norm = vec![0.0; len];
    for t in 0..frames {
        for k in 0..n {
            norm[t * hop + k] += win[k] * win[k];
        }
    }
    let mut channels = vec![vec![0.0; len]; m];
    for (c, out) in channels.iter_mut().enumerate() {
        for t in 0..frames {
            for f in 0..p.bins() {
                buf[f] = spec.get(f, t, c);
            }
            for f in p.bins()..n {
                buf[f] = buf[n - f].conj();
            }
            ifft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n {
                out[t * hop + k] += buf[k].re / n as f64 * win[k];
            }
        }
        for (v, &w) in out.iter_mut().zip(&norm) {
            *v = if w > 1e-10 { *v / w } else { 0.0 };
        }
    }
    MultichannelWave::new(sample_rate, channels)
}

/// Inverse of [`stft_padded`], trimmed back to `len` samples.
pub fn istft_padded(
    spec: &ComplexSpectrogram,
    params: StftParams,
    sample_rate: u32,
    len: usize,
) -> Result<MultichannelWave, DspError> {
    let full = istft(spec, params.window, params.hop, sample_rate)?;
    let pad = params.edge_pad();
    if full.len() < pad + len {
        return Err(DspError::InvalidParams(format!(
            "{} frames cannot cover {} samples",
            spec.frames(),
            len
        )));
    }
    let chans = full.into_channels().into_iter().map(|c| c[pad..pad + len].to_vec()).collect();
    MultichannelWave::new(sample_rate, chans)
}
