//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An operation was issued against inconsistent or missing state.
    #[error("invalid state: {0}")]
    InvalidState(String),
    /// A non-finite value appeared during a forward or backward pass.
    #[error("numeric failure in layer {layer}: {detail}")]
    NumericFailure { layer: usize, detail: String },
    /// Training loss exceeded the divergence threshold.
    #[error("training diverged at step {step}: loss {loss} > {threshold}")]
    Diverged { step: usize, loss: f64, threshold: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    /// A file did not match the expected binary container format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn invalid_state(msg: impl Into<String>) -> Self {
        Error::InvalidState(msg.into())
    }
}
