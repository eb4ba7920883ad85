use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("invalid dimension {rows}x{cols}: both must be positive")]
    InvalidDimension { rows: usize, cols: usize },
    #[error("data length {actual} does not match shape (expected {expected})")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite entry at flat index {index}")]
    NonFinite { index: usize },
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    /// Pattern or task counts that do not fit.
    #[error("capacity: {0}")]
    Capacity(String),
    /// A hyperparameter outside its admissible range.
    #[error("invalid config field `{field}`: {message}")]
    Config {
        field: &'static str,
        message: String,
    },
    #[error("label must be +1 or -1, got {0}")]
    Label(f64),
    /// A test outlier whose coefficients violate the membership condition.
    #[error("outlier coefficients sum to {sum:.6} after normalization, below L = {min_sum}")]
    Membership { sum: f64, min_sum: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    /// An unreadable, malformed or mismatched checkpoint file.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn config(field: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            field,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
