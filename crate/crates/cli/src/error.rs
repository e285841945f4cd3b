use nme_core::NmeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Prefixes a config error with the field it concerns.
    pub fn at(field: &str, err: NmeError) -> Self {
        match CliError::from(err) {
            CliError::Config(m) => CliError::Config(format!("{field}: {m}")),
            other => other,
        }
    }
}

impl From<NmeError> for CliError {
    fn from(e: NmeError) -> Self {
        match e {
            NmeError::NonFinite(_) => CliError::Numeric(e.to_string()),
            NmeError::Io(_)
            | NmeError::Csv(_)
            | NmeError::Json(_)
            | NmeError::Parse { .. }
            | NmeError::MissingColumn(_)
            | NmeError::Serialization(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
