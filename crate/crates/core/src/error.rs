use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error at row {row}, column {column}: {message}")]
    DataCell {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("degenerate predictive interval at point {index}: predictive variance is zero")]
    DegenerateInterval { index: usize },

    #[error("degenerate posterior for the precision: shape - 1 + N/2 = {0} must be positive")]
    DegeneratePosterior(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short class name, used for CLI exit codes and the C error-code mapping.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension { .. } => ErrorClass::Dimension,
            Error::Argument(_) | Error::DegenerateInterval { .. } => ErrorClass::Argument,
            Error::State(_) => ErrorClass::State,
            Error::Config(_) | Error::DegeneratePosterior(_) => ErrorClass::Config,
            Error::Csv(e) if e.is_io_error() => ErrorClass::Io,
            Error::DataCell { .. } | Error::Data(_) | Error::Csv(_) => ErrorClass::Data,
            Error::Format(_) | Error::Json(_) => ErrorClass::Format,
            Error::NonFinite(_) | Error::Training { .. } => ErrorClass::Numeric,
            Error::Io(_) => ErrorClass::Io,
        }
    }
}

/// Coarse error categories with stable integer codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ErrorClass {
    Dimension = 2,
    Argument = 3,
    State = 4,
    Config = 5,
    Data = 6,
    Format = 7,
    Numeric = 8,
    Io = 9,
}

pub type Result<T> = std::result::Result<T, Error>;
