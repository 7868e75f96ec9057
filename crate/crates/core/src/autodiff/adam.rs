use super::{AutodiffError, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam descent step, in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<(), AutodiffError> {
    let c = state.config;
    if c.lr <= 0.0 || !c.lr.is_finite() {
        return Err(AutodiffError::InvalidHyperparameter(format!("learning rate {}", c.lr)));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "adam",
            detail: format!("{} params, {} grads, {} slots", params.len(), grads.len(), state.first.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam",
                detail: format!("param {} {:?} vs grad {:?}", i, p.shape(), g.shape()),
            });
        }
        if !g.is_finite() {
            return Err(AutodiffError::NonFiniteGradient(i));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gv;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gv * gv;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *pv -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}
