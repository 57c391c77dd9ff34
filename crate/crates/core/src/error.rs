use thiserror::Error;

/// Errors produced by the forecasting engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error at row {row}, column {column}: {message}")]
    Ingestion { row: usize, column: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for errors caused by user input rather than internal failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Ingestion { .. } | Error::Format(_) | Error::Config(_) | Error::Compatibility(_) | Error::Io(_)
        )
    }
}
