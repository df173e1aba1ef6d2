//! Experiment harness: configs, datasets, training runs and sweeps.

pub mod config;
pub mod data;
pub mod run;
pub mod sweep;

pub use config::{Config, ConfigError, Precision, SweepMetric};
pub use data::{load_dataset, Dataset, DatasetSpec, DataError};
pub use run::{run_training, run_training_with, Metric, MetricRow, RunObserver, RunRecord, Scope};
pub use sweep::{read_csv, run_sweep, select_optimum, CsvRow, CsvSink, Optimum, RunSummary, SweepGrid, SweepOutcome};

use crate::diagnostics::DiagError;
use crate::network::NetworkError;
use crate::optim::OptimError;
use crate::param::ParamError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Mismatch(String),
    #[error("every candidate diverged")]
    AllDiverged,
}
