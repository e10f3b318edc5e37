use thiserror::Error;

/// Errors raised by the solvers, generators and fixture I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// The caller asked for something the contract does not allow.
    #[error("usage error: {0}")]
    Usage(String),
    /// A linear solve or factorization broke down.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A problem generator produced an instance that violates its invariants.
    #[error("generation error: {0}")]
    Generation(String),
    /// The requested operation is not defined for this scheme.
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("fixture error: {0}")]
    Fixture(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
