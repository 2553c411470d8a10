//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by density construction, quadrature, fitting and training.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced or encountered a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An unnormalized density has empty support or vanishing mass.
    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    /// Training aborted (for example a divergent loss).
    #[error("training failure: {0}")]
    Training(String),

    /// Underlying I/O failure, surfaced verbatim.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Model or config (de)serialization failure.
    #[error("serialization failure: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateDensity(msg.into())
    }
}
