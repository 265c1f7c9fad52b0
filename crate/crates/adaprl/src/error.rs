use std::io;
use std::path::{Path, PathBuf};

use adaprl_core::data::DataError;
use adaprl_core::losses::LossError;
use adaprl_core::metrics::MetricError;
use adaprl_core::model::ModelError;
use adaprl_core::train::TrainError;
use thiserror::Error;

/// Every failure the command line can report, grouped by exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numerical(_) => 3,
            AppError::Io { .. } => 4,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> AppError + '_ {
        move |source| AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<DataError> for AppError {
    fn from(e: DataError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<MetricError> for AppError {
    fn from(e: MetricError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => AppError::Config(e.to_string()),
            ModelError::Graph(_) => AppError::Numerical(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<LossError> for AppError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::InvalidSpec(_) => AppError::Config(e.to_string()),
            LossError::Shape { .. } | LossError::EmptyBatch => AppError::Data(e.to_string()),
            _ => AppError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => AppError::Config(e.to_string()),
            TrainError::EmptySplit { .. } => AppError::Data(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::NonFiniteValidation { .. } => {
                AppError::Numerical(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Loss(l) => l.into(),
            TrainError::Metric(m) => m.into(),
        }
    }
}
