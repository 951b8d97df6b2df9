//! Crate-wide error type.
//!
//! Variants map onto the process exit codes used by the CLI:
//! usage/config errors exit 1, I/O errors exit 2, numeric failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Configuration file or flag problem (unknown key, bad value, missing input).
    #[error("config error: {0}")]
    Config(String),

    /// Command-line usage error.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Process exit code for the CLI: 1 usage, 2 I/O, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format { .. } => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
