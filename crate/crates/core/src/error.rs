use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    InvalidInput { field: String, reason: String },

    #[error("Gram matrix is not positive semidefinite (eigenvalue {min_eigenvalue:e})")]
    InvalidGram { min_eigenvalue: f64 },

    #[error("search space of {configurations} configurations exceeds the limit of {limit}")]
    SearchSpaceTooLarge { configurations: f64, limit: u64 },

    #[error("malformed policy response: {0}")]
    MalformedPolicy(String),

    #[error("homodyne zero-threshold rule requires equal priors, got q0 = {prior0}")]
    UnequalPriors { prior0: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidInput {
        field: field.into(),
        reason: reason.into(),
    }
}
