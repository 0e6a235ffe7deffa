//! Datasets, checkpoints, the training harness, and experiment
//! configuration for tree-structured anytime ensembles.
//!
//! The algorithmic substrate (tensors, differentiation, evaluation engines,
//! objectives, cost model) lives in `hne-core`; this crate adds everything
//! that touches the filesystem plus the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, ExperimentConfig};
pub use data::{AugmentPolicy, Dataset, Split};
pub use train::{evaluate, train, EvalSummary, MetricLog, TrainConfig, TrainOutcome};

/// Errors from dataset parsing, checkpoint IO, and the training harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Core(#[from] hne_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
