//! Training, evaluation and the ablation studies.

pub mod ablate;
mod config;
mod metrics;
mod optim;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::model::{CheckpointError, ModelError};
use crate::taf::TafError;
use crate::tensor::TensorError;

pub use config::{Mode, Protocol, TrainConfig};
pub use metrics::{
    attenuate_eval, class_change_rate_gt, class_change_rate_model, evaluate, evaluate_with,
    write_metrics_csv, Attenuation, AttenuationMode, ClassRates, ConfusionMatrix, Metrics, SwapSpec,
};
pub use optim::{poly_lr, Sgd};
pub use train::{read_log_csv, train, write_log_csv, LogRow, TrainOptions, TrainOutcome};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Taf(#[from] TafError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(
        "non-finite loss at epoch {epoch}, step {step} (batch seed {batch_seed}, clips {clip_ids:?}): {detail}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        batch_seed: u64,
        clip_ids: Vec<usize>,
        detail: String,
    },
    #[error("ablation needs at least {needed} seeds, got {got}")]
    InsufficientSeeds { needed: usize, got: usize },
}

impl EngineError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> EngineError {
        let path = path.into();
        move |source| EngineError::Io { path, source }
    }

    /// True for errors caused by configuration rather than data or numerics.
    pub fn is_config(&self) -> bool {
        match self {
            EngineError::Config(_) | EngineError::InsufficientSeeds { .. } => true,
            EngineError::Taf(TafError::Config(_) | TafError::Disabled) => true,
            EngineError::Model(ModelError::Config(_) | ModelError::InputSize { .. }) => true,
            EngineError::Checkpoint(CheckpointError::Mismatch(_)) => true,
            _ => false,
        }
    }
}
