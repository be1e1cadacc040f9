//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration file failed to parse or failed semantic validation.
    #[error("config error: {0}")]
    Config(String),

    /// An API was called with inconsistent arguments (shape/length mismatch,
    /// unknown name, out-of-range index).
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric invariant broke at runtime: non-finite gradients, a linear
    /// solve whose residual exceeds tolerance, a malformed distribution.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A checkpoint or archive on disk is malformed or from a different
    /// format version.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
