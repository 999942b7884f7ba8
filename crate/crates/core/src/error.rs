use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or specification (bad lag, bad config value, ...).
    #[error("invalid input: {0}")]
    Invalid(String),
    /// Malformed or inconsistent data (files, panels, station records).
    #[error("data error: {0}")]
    Data(String),
    /// A numerical routine failed (singular system, non-finite value).
    #[error("numerical failure: {0}")]
    Numeric(String),
    /// An iterative fit did not converge within its budget.
    #[error("fit did not converge: {0}")]
    NonConvergence(String),
    /// A required artifact or input is missing.
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn missing(msg: impl Into<String>) -> Self {
        Error::Missing(msg.into())
    }
}
