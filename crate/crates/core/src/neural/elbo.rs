use super::input::PreparedInput;
use super::model::{Bound, InferenceVars, NeuralModel};
use super::{NeuralError, Stage};
use crate::autodiff::{Graph, Tensor, Var};

/// Graph handles for one ELBO evaluation.
#[derive(Clone, Debug)]
pub struct ElboVars {
    /// Likelihood term `T Σ_f ln|Q_f Q_fᴴ| − Σ (ln ỹ + |x̃|²/ỹ)`.
    pub ll: Var,
    /// `½ Σ (μ² + σ² − ln σ² − 1)`.
    pub kl: Var,
    /// `ll − kl`.
    pub elbo: Var,
    /// Minimization target `−(ll − β·kl) / (F·T·M)`.
    pub objective: Var,
    pub inference: InferenceVars,
    /// Decoded spectra `[N, F, T]`.
    pub psd: Var,
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, 1))` summed over all entries.
pub fn kl_divergence(mu: &[f64], sigma2: &[f64]) -> f64 {
    0.5 * mu.iter().zip(sigma2).map(|(m, s)| m * m + s - s.ln() - 1.0).sum::<f64>()
}

/// Builds the ELBO for one mixture with a single reparameterized sample
/// `z = μ + σ·noise`; `noise` is `[N, D, T]`.
pub fn elbo_graph(
    model: &NeuralModel,
    g: &mut Graph,
    trainable: bool,
    input: &PreparedInput,
    noise: &Tensor,
    kl_weight: f64,
) -> Result<(ElboVars, Vec<Var>), NeuralError> {
    let p = model.bind(g, trainable);
    let vars = elbo_on(model, g, &p, input, noise, kl_weight)?;
    Ok((vars, p.vars))
}

pub(crate) fn elbo_on(
    model: &NeuralModel,
    g: &mut Graph,
    p: &Bound,
    input: &PreparedInput,
    noise: &Tensor,
    kl_weight: f64,
) -> Result<ElboVars, NeuralError> {
    let c = &model.config;
    let expect = [c.sources, c.latent_dim, input.frames];
    if noise.shape() != expect {
        return Err(NeuralError::Config(format!("noise shape {:?}, expected {expect:?}", noise.shape())));
    }
    let inf = model.infer_graph(g, p, input)?;
    let z = (|| {
        let sd = g.powf(inf.sigma2, 0.5)?;
        let eps = g.constant(noise.clone());
        let s = g.mul(sd, eps)?;
        g.add(inf.mu, s)
    })()
    .stage("sampling")?;
    let psd = model.decode_graph(g, p, z)?;
    let (nf, nm, nt) = (c.bins, c.channels, input.frames);
    let terms = (|| {
        // ỹ [F, M, T] = Σ_n g_nm λ_nft
        let lam = g.permute(psd, &[1, 2, 0])?;
        let y = g.matmul(lam, inf.g)?;
        let y = g.permute(y, &[0, 2, 1])?;
        let pw = g.c_abs2(inf.xt)?;
        let ly = g.log(y)?;
        let ratio = g.div(pw, y)?;
        let fit = g.add(ly, ratio)?;
        let fit = g.sum(fit)?;
        let logdet = g.c_logabsdet(inf.q)?;
        let logdet = g.sum(logdet)?;
        let logdet = g.scale(logdet, 2.0 * nt as f64)?;
        let ll = g.sub(logdet, fit)?;

        let mu2 = g.square(inf.mu)?;
        let ls = g.log(inf.sigma2)?;
        let k = g.add(mu2, inf.sigma2)?;
        let k = g.sub(k, ls)?;
        let k = g.add_scalar(k, -1.0)?;
        let k = g.sum(k)?;
        let kl = g.scale(k, 0.5)?;

        let elbo = g.sub(ll, kl)?;
        let wkl = g.scale(kl, kl_weight)?;
        let obj = g.sub(wkl, ll)?;
        let objective = g.scale(obj, 1.0 / (nf * nt * nm) as f64)?;
        Ok((ll, kl, elbo, objective))
    })()
    .stage("elbo")?;
    let (ll, kl, elbo, objective) = terms;
    Ok(ElboVars { ll, kl, elbo, objective, inference: inf, psd })
}

/// Result of [`elbo_grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter tensor.
    pub per_param: Vec<(String, f64)>,
    pub worst: f64,
}

/// Compares the analytic gradient of the ELBO with central finite
/// differences along `directions` random unit directions per parameter
/// tensor. The error for one direction `d` is
/// `|⟨∇, d⟩ − fd| / max(|⟨∇, d⟩|, |fd|, 1e-12)`.
pub fn elbo_grad_check(
    model: &NeuralModel,
    input: &PreparedInput,
    noise: &Tensor,
    kl_weight: f64,
    directions: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, NeuralError> {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    let mut g = Graph::new();
    let (vars, params) = elbo_graph(model, &mut g, true, input, noise, kl_weight)?;
    let target = vars.elbo;
    let grads = g.backward(target).stage("backward")?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = Vec::with_capacity(params.len());
    for (slot, &leaf) in params.iter().enumerate() {
        let base = model.params.get(slot).clone();
        let grad = grads.get(leaf);
        let mut worst: f64 = 0.0;
        for _ in 0..directions {
            let mut d: Vec<f64> = (0..base.numel()).map(|_| rng.sample(StandardNormal)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.iter_mut().for_each(|v| *v /= norm);
            let analytic: f64 = grad.data().iter().zip(&d).map(|(a, b)| a * b).sum();
            let shifted = |sign: f64| {
                Tensor::new(base.shape(), base.data().iter().zip(&d).map(|(p, v)| p + sign * step * v).collect()).expect("shape")
            };
            g.forward(&[(leaf, shifted(1.0))]).stage("probe")?;
            let up = g.value(target).item();
            g.forward(&[(leaf, shifted(-1.0))]).stage("probe")?;
            let down = g.value(target).item();
            let fd = (up - down) / (2.0 * step);
            worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12));
        }
        g.forward(&[(leaf, base)]).stage("probe")?;
        per_param.push((model.params.names()[slot].clone(), worst));
    }
    let worst = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport { per_param, worst })
}
