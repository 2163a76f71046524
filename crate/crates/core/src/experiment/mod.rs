//! Run harness: reproducible configs, the pretrain/search/sweep/ablation
//! pipelines and their CSV reports.

mod config;
mod pipeline;
mod reports;

pub use config::{DataSource, DataSpec, RunConfig};
pub use pipeline::{
    cmd_ablate_attention, cmd_baseline, cmd_pretrain, cmd_search, cmd_sweep, cost_table, load_data,
    AblationRow, BaselineRow, PretrainRun, SearchRun, SweepCell, SweepResult,
};
pub use reports::{
    degradation_stats, latency_rows, report_distribution, write_csv, DegradationStats,
    DistributionRow, LatencyRow,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::latency::LatencyError;
use crate::train::TrainError;
use crate::vit::VitError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    /// Process exit status: 2 for configuration problems, 3 when training
    /// does not converge, 4 for I/O and file-format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Toml { .. } | Self::Latency(_) => 2,
            Self::Train(TrainError::NonConvergence { .. } | TrainError::Autodiff(_)) => 3,
            Self::Train(TrainError::Vit(e)) | Self::Vit(e) => match e {
                VitError::Io(_) | VitError::Checkpoint(_) => 4,
                VitError::Autodiff(_) => 3,
                _ => 2,
            },
            Self::Train(_) => 2,
            Self::Data(DataError::Invalid(_) | DataError::NotEnoughImages { .. }) => 2,
            Self::Data(_) | Self::Io { .. } | Self::Csv(_) => 4,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<PathBuf, ExperimentError> {
    std::fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}
