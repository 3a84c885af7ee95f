use thiserror::Error;

/// Errors surfaced by the library.
///
/// The variants mirror the failure classes of the public contracts:
/// shape/extent problems, precondition violations, math-domain issues,
/// on-disk format problems, and non-finite values appearing mid-compute.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
