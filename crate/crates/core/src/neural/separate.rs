use num_complex::Complex64;

use super::input::PreparedInput;
use super::model::NeuralModel;
use super::NeuralError;
use crate::autodiff::{Graph, Tensor};
use crate::dsp::ComplexSpectrogram;
use crate::linalg::CMatrix;
use crate::spatial::{self, Diagonalizer, Separation, SourceGains, SourcePsd};

/// Concrete inference network outputs for one mixture.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub q: Diagonalizer,
    pub gains: SourceGains,
    /// `[N, D, T]`.
    pub mu: Tensor,
    /// `[N, D, T]`.
    pub sigma2: Tensor,
    /// Per-ISS-block masks, `[F, M, T]` each.
    pub masks: Vec<Tensor>,
    /// Decoded `λ` at `z = μ`, `[N, F, T]`, for the normalized mixture.
    pub psd: Tensor,
}

/// Runs the inference network and decodes the posterior mean.
pub fn infer(model: &NeuralModel, spec: &ComplexSpectrogram) -> Result<InferenceOutput, NeuralError> {
    let input = PreparedInput::new(spec);
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let inf = model.infer_graph(&mut g, &p, &input)?;
    let psd = model.decode_graph(&mut g, &p, inf.mu)?;
    let (nf, nm) = (model.config.bins, model.config.channels);
    let (qr, qi) = (g.value(inf.q.re).data(), g.value(inf.q.im).data());
    let qs = (0..nf)
        .map(|f| {
            let blk = f * nm * nm..(f + 1) * nm * nm;
            let data = qr[blk.clone()].iter().zip(&qi[blk]).map(|(&r, &i)| Complex64::new(r, i)).collect();
            CMatrix::from_rows(nm, data).expect("square block")
        })
        .collect();
    let gv = g.value(inf.g);
    let gains = SourceGains::new(gv.data().chunks_exact(nm).map(<[f64]>::to_vec).collect())?;
    Ok(InferenceOutput {
        q: Diagonalizer::new(qs)?,
        gains,
        mu: g.value(inf.mu).clone(),
        sigma2: g.value(inf.sigma2).clone(),
        masks: inf.masks.iter().map(|&m| g.value(m).clone()).collect(),
        psd: g.value(psd).clone(),
    })
}

/// Separates `spec` with `λ = decode(μ)` and the inferred `Q`, `g`.
/// `reference` is zero-based.
pub fn neural_separate(model: &NeuralModel, spec: &ComplexSpectrogram, reference: usize) -> Result<Separation, NeuralError> {
    let out = infer(model, spec)?;
    let s = out.psd.shape();
    let psd = SourcePsd::new(s[0], s[1], s[2], out.psd.data().to_vec())?;
    Ok(spatial::wiener_separate(spec, &psd, &out.q, &out.gains, reference, false)?)
}
