//! Feedback collection service: experiment store, sessions, sampling,
//! submission, training snapshots and the HTTP interface over them.

pub mod error;
pub mod http;
pub mod log;
pub mod service;
pub mod wire;

pub use error::{ErrorBody, ServiceError};
pub use service::FeedbackService;
