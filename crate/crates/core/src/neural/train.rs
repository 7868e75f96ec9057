use std::collections::VecDeque;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::elbo::elbo_graph;
use super::input::PreparedInput;
use super::model::NeuralModel;
use super::{NeuralError, Stage};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::dsp::ComplexSpectrogram;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Clips per Adam step.
    pub batch_size: usize,
    /// Frames per training crop.
    pub clip_frames: usize,
    /// Cycles of the KL weight schedule over the whole run.
    pub kl_cycles: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Abort when the ELBO moving average falls this many times the peak
    /// magnitude below its peak.
    pub divergence_factor: f64,
    /// Moving-average window (steps) used by the divergence detector.
    pub moving_average: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: 4,
            clip_frames: 128,
            kl_cycles: 4,
            grad_clip: 5.0,
            seed: 0,
            divergence_factor: 10.0,
            moving_average: 20,
        }
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.clip_frames == 0 || self.kl_cycles == 0 || self.moving_average == 0 {
            return bad("epochs, batch_size, clip_frames, kl_cycles and moving_average must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.grad_clip >= 0.0) || !(self.divergence_factor > 0.0) {
            return bad("grad_clip must be nonnegative and divergence_factor positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batch mean of `ll − kl`.
    pub elbo: f64,
    pub ll: f64,
    pub kl: f64,
    pub kl_weight: f64,
    /// Global gradient norm of the objective before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub metrics: Vec<MetricRecord>,
    /// Seconds since the start of training, one per step.
    pub wall_seconds: Vec<f64>,
}

/// Cyclic annealing: within each of `cycles` equal cycles the weight rises
/// linearly from 0 to 1 over the first half and stays at 1 for the second.
pub fn kl_weight(step: usize, total_steps: usize, cycles: usize) -> f64 {
    let len = (total_steps as f64 / cycles.max(1) as f64).max(1.0);
    let pos = (step as f64 % len) / len;
    (2.0 * pos).min(1.0)
}

/// Maximizes the ELBO over `data` with Adam. `on_step` sees every record as
/// it is produced, together with the updated model.
pub fn train(
    model: &mut NeuralModel,
    data: &[ComplexSpectrogram],
    config: &TrainConfig,
    mut on_step: impl FnMut(&MetricRecord, &NeuralModel),
) -> Result<TrainReport, NeuralError> {
    config.validate()?;
    if data.is_empty() {
        return Err(NeuralError::Config("no training data".into()));
    }
    if let Some(short) = data.iter().map(ComplexSpectrogram::frames).min().filter(|&t| t < config.clip_frames) {
        return Err(NeuralError::Config(format!("clip_frames {} exceeds shortest item ({short} frames)", config.clip_frames)));
    }
    let c = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig { lr: config.learning_rate, ..AdamConfig::default() };
    let mut state = AdamState::new(adam, model.params.values());
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let start = Instant::now();
    let mut report = TrainReport::default();
    let mut window: VecDeque<f64> = VecDeque::with_capacity(config.moving_average);
    let mut peak = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let beta = kl_weight(step, total, config.kl_cycles);
            let mut grads: Vec<Tensor> = model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let (mut elbo, mut ll, mut kl) = (0.0, 0.0, 0.0);
            for &i in batch {
                let clip = &data[i];
                let offset = rng.random_range(0..=clip.frames() - config.clip_frames);
                let input = PreparedInput::new(&clip.slice_frames(offset, config.clip_frames));
                let noise = Tensor::from_fn(&[c.sources, c.latent_dim, config.clip_frames], |_| rng.sample(StandardNormal));
                let mut g = Graph::new();
                let (vars, params) = elbo_graph(model, &mut g, true, &input, &noise, beta)
                    .map_err(|e| NeuralError::Diverged { step, reason: e.to_string() })?;
                let back = g.backward(vars.objective).stage("backward")?;
                for (acc, &v) in grads.iter_mut().zip(&params) {
                    for (a, b) in acc.data_mut().iter_mut().zip(back.get(v).data()) {
                        *a += b / batch.len() as f64;
                    }
                }
                elbo += g.value(vars.elbo).item() / batch.len() as f64;
                ll += g.value(vars.ll).item() / batch.len() as f64;
                kl += g.value(vars.kl).item() / batch.len() as f64;
            }
            let grad_norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(NeuralError::Diverged { step, reason: "non-finite gradient".into() });
            }
            if config.grad_clip > 0.0 && grad_norm > config.grad_clip {
                let s = config.grad_clip / grad_norm;
                for t in &mut grads {
                    t.data_mut().iter_mut().for_each(|v| *v *= s);
                }
            }
            adam_step(model.params.values_mut(), &grads, &mut state).stage("adam")?;

            let rec = MetricRecord { step, epoch, elbo, ll, kl, kl_weight: beta, grad_norm };
            on_step(&rec, model);
            report.metrics.push(rec);
            report.wall_seconds.push(start.elapsed().as_secs_f64());

            if window.len() == config.moving_average {
                window.pop_front();
            }
            window.push_back(elbo);
            if window.len() == config.moving_average {
                let ma = window.iter().sum::<f64>() / window.len() as f64;
                peak = peak.max(ma);
                if peak - ma > config.divergence_factor * peak.abs().max(1.0) {
                    return Err(NeuralError::Diverged {
                        step,
                        reason: format!("ELBO moving average {ma:.4e} fell from peak {peak:.4e}"),
                    });
                }
            }
            step += 1;
        }
    }
    Ok(report)
}
