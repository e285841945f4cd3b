use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum NmeError {
    #[error("missing column: {0}")]
    MissingColumn(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("group {group} has {count} observations, at least {required} required")]
    TooFewObservations {
        group: String,
        count: usize,
        required: usize,
    },

    #[error("no groups survive filter")]
    NoGroupsSurvive,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot register tensors after training has started")]
    RegistrationClosed,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("group sets differ: {0}")]
    GroupMismatch(String),

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NmeError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NmeError::InvalidArgument(msg.into())
    }

    pub fn non_finite(msg: impl Into<String>) -> Self {
        NmeError::NonFinite(msg.into())
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, NmeError::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, NmeError>;
