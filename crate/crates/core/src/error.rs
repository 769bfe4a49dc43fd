use thiserror::Error;

/// Errors raised by the scheduling, GP and evidence routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A factorization or other numerical routine failed. `detail` carries
    /// diagnostics such as the largest jitter tried.
    #[error("numerical failure: {detail}")]
    Numeric { detail: String },

    #[error("capacity exceeded: {what} ({size} > {limit})")]
    Capacity {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric { detail: msg.into() }
    }
}
