use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A law was evaluated outside the region where it is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("conflicting records: {0}")]
    Conflict(String),

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
