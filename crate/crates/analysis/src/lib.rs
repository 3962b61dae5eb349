//! Offline analysis of feedback experiments, headless simulation against
//! the feedback service, and the acceptance suite.

pub mod commands;
pub mod criteria;
pub mod error;
pub mod inputs;
pub mod report;
pub mod simulate;

pub use commands::CalibrationFilter;
pub use error::CliError;
pub use inputs::{ExperimentInputs, InputPaths};
pub use report::AnalysisReport;
