use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum MaracError {
    /// Matrix/vector dimensions do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A linear system could not be factorized even after jitter escalation.
    #[error("singular system: {0}")]
    Singular(String),
    /// Too few frames for the requested lags/split.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// Coefficients fail the joint stationarity condition.
    #[error("not stationary: {0}")]
    NonStationary(String),
    /// On-disk data does not match its manifest or expected schema.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Invariant that the algorithm itself guarantees was violated; indicates a bug.
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<serde_json::Error> for MaracError {
    fn from(e: serde_json::Error) -> Self {
        MaracError::Format(format!("json: {e}"))
    }
}

impl From<csv::Error> for MaracError {
    fn from(e: csv::Error) -> Self {
        MaracError::Format(format!("csv: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, MaracError>;
