//! Evaluation metrics, benchmarking, run configuration and the pipelines
//! behind the command-line tool.

mod bench;
mod config;
mod metrics;
mod pipeline;

pub use bench::{median, time_repeats, BenchReport, BenchRow, Fingerprint};
pub use config::{BenchSection, DatasetSection, FastMnmfSection, Method, ModelSection, Profile, RunConfig, SeparateSection};
pub use metrics::{assign_max, evaluate_scene, permute_align, si_sdr, top_k_by_power, Alignment, EvalReport, SceneEval, SI_SDR_CAP};
pub use pipeline::{
    bench_pipeline, evaluate_pipeline, load_manifest, separate_pipeline, simulate, train_pipeline, write_resolved_config,
    EstimateRecord, ManifestRecord, Split, BENCH, CHECKPOINT, ESTIMATES, MANIFEST, METRICS, REPORT, RESOLVED_CONFIG, TIMING,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("estimate has {estimate} samples, reference has {reference}")]
    Length { estimate: usize, reference: usize },
    #[error("reference signal has zero energy")]
    ZeroReference,
    #[error("{estimates} estimates for {references} references")]
    TooFewEstimates { estimates: usize, references: usize },
    #[error("{0}")]
    Shape(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{stage}: {source}")]
    Stage { stage: String, source: BoxError },
}

impl HarnessError {
    /// Configuration problems are reported separately from runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

/// Labels an error with the pipeline stage it came from.
pub(crate) trait At<T> {
    fn at(self, stage: &str) -> Result<T, HarnessError>;
}

impl<T, E: Into<BoxError>> At<T> for Result<T, E> {
    fn at(self, stage: &str) -> Result<T, HarnessError> {
        self.map_err(|e| HarnessError::Stage { stage: stage.to_string(), source: e.into() })
    }
}

pub(crate) trait AtPath<T> {
    fn at_path(self, path: &Path) -> Result<T, HarnessError>;
}

impl<T> AtPath<T> for std::io::Result<T> {
    fn at_path(self, path: &Path) -> Result<T, HarnessError> {
        self.map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
    }
}
