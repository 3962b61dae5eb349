use feedback_core::analysis::AnalysisError;
use feedback_core::buffer::BufferError;
use feedback_core::config::{ConfigError, FeedbackKind};
use feedback_core::encoding::EncodingError;
use feedback_core::reward_model::RewardModelError;
use feedback_core::sampler::SamplerError;
use feedback_core::translator::TranslateError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("experiment {0} already exists")]
    Conflict(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("no more episodes to serve")]
    Exhausted,
    #[error("feedback type {0} is disabled for this experiment")]
    DisabledFeedbackType(FeedbackKind),
    #[error("no usable training data")]
    EmptyDataset,
    #[error("not enough calibration or repeat responses")]
    InsufficientData,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ServiceError {
    /// Stable machine-readable name used in error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ServiceError::Validation { .. } => "validation_error",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::SessionNotFound(_) => "session_not_found",
            ServiceError::Exhausted => "exhausted",
            ServiceError::DisabledFeedbackType(_) => "disabled_feedback_type",
            ServiceError::EmptyDataset => "empty_dataset",
            ServiceError::InsufficientData => "insufficient_data",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Corrupt(_) => "corrupt_store",
            ServiceError::Io(_) => "io_error",
            ServiceError::Internal(_) => "internal_error",
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: self.kind().into(),
            message: self.to_string(),
            field: match self {
                ServiceError::Validation { field, .. } => Some(field.clone()),
                _ => None,
            },
        }
    }
}

impl From<ConfigError> for ServiceError {
    fn from(e: ConfigError) -> Self {
        ServiceError::Validation {
            field: e.field,
            reason: e.reason,
        }
    }
}

impl From<BufferError> for ServiceError {
    fn from(e: BufferError) -> Self {
        match e {
            BufferError::NotFound(id) => ServiceError::NotFound(format!("episode {id}")),
            BufferError::Io(e) => ServiceError::Io(e),
            other => ServiceError::Corrupt(other.to_string()),
        }
    }
}

impl From<SamplerError> for ServiceError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Exhausted => ServiceError::Exhausted,
            SamplerError::ZeroBatch => ServiceError::BadRequest(e.to_string()),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<RewardModelError> for ServiceError {
    fn from(e: RewardModelError) -> Self {
        match e {
            RewardModelError::EmptyDataset => ServiceError::EmptyDataset,
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<AnalysisError> for ServiceError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::InsufficientData | AnalysisError::NoCalibrationData => {
                ServiceError::InsufficientData
            }
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

impl From<EncodingError> for ServiceError {
    fn from(e: EncodingError) -> Self {
        ServiceError::Corrupt(e.to_string())
    }
}

/// JSON error body of every failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

/// Positional rejection of one submitted event.
pub fn event_error(e: &TranslateError) -> ErrorBody {
    let error = match e {
        TranslateError::DisabledFeedbackType(_) => "disabled_feedback_type",
        TranslateError::UnknownTargets(_) => "unknown_targets",
        TranslateError::ScaleError { .. } => "scale_error",
        TranslateError::EmptyRanking => "empty_ranking",
        TranslateError::InvalidPayload(_) => "invalid_payload",
        TranslateError::ReplayError(_) => "replay_error",
        TranslateError::NotRelative => "not_relative",
        TranslateError::Invalid(_) => "invariant_violation",
        TranslateError::Buffer(_) => "buffer_error",
    };
    ErrorBody {
        error: error.into(),
        message: e.to_string(),
        field: None,
    }
}
