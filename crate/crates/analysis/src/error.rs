use std::path::PathBuf;

use feedback_core::analysis::AnalysisError;
use feedback_core::buffer::BufferError;
use feedback_core::encoding::EncodingError;
use feedback_core::gridworld::EnvError;
use feedback_core::reward_model::RewardModelError;
use feedback_service::{ErrorBody, ServiceError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadInput { path: PathBuf, reason: String },
    #[error("{path} line {line}: {source}")]
    Log {
        path: PathBuf,
        line: usize,
        source: EncodingError,
    },
    #[error("no calibration data in the log")]
    NoCalibrationData,
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    Analysis(AnalysisError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] RewardModelError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("server answered {status}: {}: {}", .body.error, .body.message)]
    Remote { status: u16, body: ErrorBody },
    #[error("transport: {0}")]
    Transport(String),
    #[error("simulation: {0}")]
    Simulation(String),
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::NoCalibrationData => CliError::NoCalibrationData,
            e => CliError::Analysis(e),
        }
    }
}

impl From<reqwest::Error> for CliError {
    fn from(e: reqwest::Error) -> Self {
        CliError::Transport(e.to_string())
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
