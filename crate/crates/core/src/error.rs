//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulator construction, execution, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or orientation of an operand does not match the operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is outside its legal range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A binary tensor file is malformed.
    #[error("malformed {format} file: {reason}")]
    Format { format: &'static str, reason: String },

    /// A required calibration is missing.
    #[error("missing calibration: {0}")]
    MissingCalibration(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format { format, reason: reason.into() }
    }
}
