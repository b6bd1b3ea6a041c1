use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not agree with what an operation requires.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A value lies outside the domain of an operation (NaN, Inf, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An invalid hyperparameter or configuration value.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an API contract (non-scalar loss, empty buffer, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A softmax row had every entry masked out.
    #[error("degenerate row {row}: every entry is masked")]
    DegenerateRow { row: usize },

    /// Bad labels or inconsistent dataset contents.
    #[error("data error: {0}")]
    Data(String),

    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { location: location.into(), message: message.into() }
    }
}
