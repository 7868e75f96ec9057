//! Neural FastFCA: a latent-variable source model whose posterior, spatial
//! diagonalizer and gains are produced by an inference network that
//! alternates DNN blocks with ISS updates.
//!
//! The pieces are [`NeuralModel`] (parameters and graph construction),
//! [`elbo_graph`] (training objective), [`train`] and [`neural_separate`].

mod elbo;
mod input;
mod model;
mod separate;
mod train;

pub use elbo::{elbo_grad_check, elbo_graph, kl_divergence, ElboVars, GradCheckReport};
pub use input::PreparedInput;
pub use model::{InferenceVars, NeuralConfig, NeuralModel};
pub use separate::{infer, neural_separate, InferenceOutput};
pub use train::{kl_weight, train, MetricRecord, TrainConfig, TrainReport};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::container::ContainerError;
use crate::spatial::SpatialError;

/// Floor added to decoded power spectra.
pub const PSD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input has {got} frequency bins, the network was built for {expected}")]
    BinMismatch { expected: usize, got: usize },
    #[error("input has {got} channels, the network was built for {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("{stage}: {source}")]
    Graph { stage: String, source: AutodiffError },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] ContainerError),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
}

/// Attaches a stage label to graph errors.
pub(crate) trait Stage<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T, NeuralError>;
}

impl<T> Stage<T> for Result<T, AutodiffError> {
    fn stage(self, stage: impl Into<String>) -> Result<T, NeuralError> {
        self.map_err(|source| NeuralError::Graph { stage: stage.into(), source })
    }
}
