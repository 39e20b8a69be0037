//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants separate shape
//! problems (wrong dimensions), domain problems (log of a non-positive
//! value), contract violations (an API precondition broken by the caller),
//! configuration problems, and the retryable not-ready signal used by the
//! training loop before the replay buffer can fill a batch.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BvmeError {
    /// Operand shapes do not fit the operation.
    #[error("dimension error in {op}: {details}")]
    Dimension { op: String, details: String },

    /// A numeric domain was violated (e.g. log of a non-positive value).
    #[error("domain error in {op}: {details}")]
    Domain { op: String, details: String },

    /// An API precondition was broken by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A config file or config value is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// The operation cannot run yet (e.g. replay buffer below batch size).
    #[error("not ready: {0}")]
    NotReady(String),

    /// Filesystem or serialization failure while reading/writing artifacts.
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, BvmeError>;

impl BvmeError {
    pub fn dimension(op: &str, details: impl Into<String>) -> Self {
        BvmeError::Dimension { op: op.to_string(), details: details.into() }
    }

    pub fn domain(op: &str, details: impl Into<String>) -> Self {
        BvmeError::Domain { op: op.to_string(), details: details.into() }
    }
}

impl From<std::io::Error> for BvmeError {
    fn from(e: std::io::Error) -> Self {
        BvmeError::Io(e.to_string())
    }
}
