//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every op is evaluated as soon as it is recorded and
//! the tape can later be replayed with new leaf values ([`Graph::forward`]) or
//! differentiated from a scalar node ([`Graph::backward`]). Complex values are
//! represented as pairs of real tensors ([`CVar`]).

mod adam;
mod complex;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use complex::CVar;
pub use graph::{Gradients, Graph, Var};
pub use params::ParamStore;
pub use tensor::Tensor;

use thiserror::Error;

/// Floor applied to denominators and log arguments, identically in the
/// forward and backward passes.
pub const GUARD_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} is not a leaf and cannot be bound")]
    NotALeaf(usize),
    #[error("matrix {batch} of a determinant batch is singular")]
    Singular { batch: usize },
    #[error("gradient for parameter {0} is not finite")]
    NonFiniteGradient(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("finite-difference probe produced a non-finite loss")]
    NonFiniteProbe,
}

/// Largest relative disagreement between the analytic gradient of `loss`
/// with respect to `leaf` and central finite differences with step `step`.
///
/// The per-element error is `|a - c| / max(|a|, |c|, 1e-8)`. The graph is
/// restored to its original leaf value before returning.
pub fn grad_check(graph: &mut Graph, loss: Var, leaf: Var, step: f64) -> Result<f64, AutodiffError> {
    if step <= 0.0 || !step.is_finite() {
        return Err(AutodiffError::InvalidHyperparameter(format!("step {}", step)));
    }
    if !graph.is_leaf(leaf) {
        return Err(AutodiffError::NotALeaf(leaf.index()));
    }
    let analytic = graph.backward(loss)?.get(leaf);
    let base = graph.value(leaf).clone();
    let mut worst: f64 = 0.0;
    let mut probe = base.clone();
    let result = (|| {
        for i in 0..base.numel() {
            probe.data_mut()[i] = base.data()[i] + step;
            graph.forward(&[(leaf, probe.clone())])?;
            let up = graph.value(loss).item();
            probe.data_mut()[i] = base.data()[i] - step;
            graph.forward(&[(leaf, probe.clone())])?;
            let down = graph.value(loss).item();
            probe.data_mut()[i] = base.data()[i];
            if !up.is_finite() || !down.is_finite() {
                return Err(AutodiffError::NonFiniteProbe);
            }
            let central = (up - down) / (2.0 * step);
            let a = analytic.data()[i];
            let err = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
            worst = worst.max(err);
        }
        Ok(())
    })();
    graph.forward(&[(leaf, base)])?;
    result.map(|_| worst)
}

#[cfg(test)]
mod tests;
