//! Two-phase training runs on a toy teacher task, the experiment matrix and
//! loss-tracking metrics.

use thiserror::Error;

use crate::layout::LayoutError;
use crate::qat::QatError;
use crate::scaling::ScalingError;

pub mod config;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod output;
pub mod train;

pub use config::{AlgoName, QuantConfig, ScalingMode};
pub use matrix::{
    reference_matrix, run_matrix, run_with_baseline, small_batch_preset, MatrixOutcome, MatrixRow, RunPair, RunSummary,
};
pub use metrics::{ape, final_window};
pub use model::{ToyArch, ToyModel, ToyTask};
pub use train::{plain_train, two_phase_train, Phase, RunRecord, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("baseline run failed: {0}")]
    Baseline(String),
    #[error("output error: {0}")]
    Io(String),
    #[error(transparent)]
    Qat(#[from] QatError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Scaling(#[from] ScalingError),
}
