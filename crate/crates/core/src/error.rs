//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data or files (bad tables, misaligned artifacts).
    #[error("data error: {0}")]
    Data(String),

    /// Shape or configuration mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument values (out-of-range rates, zero hidden size, ...).
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Numerical failure: divergence, non-finite values, non-convergence.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
