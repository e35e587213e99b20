use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum DynCovError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// All kernel weights vanished for a local problem.
    #[error("degenerate kernel window: {0}")]
    DegenerateWindow(String),

    /// The index values X'b are constant so no range-based bandwidth exists.
    #[error("degenerate index: {0}")]
    DegenerateIndex(String),

    #[error("empty kernel window at query point")]
    EmptyWindow,

    #[error("cross-validation failed: {0}")]
    CvFailure(String),

    #[error("GARCH fit failed: {message}")]
    FitFailure {
        message: String,
        /// Best parameter vector seen, as (alpha0, alpha.., gamma..).
        best: Option<Vec<f64>>,
    },

    #[error("matrix factorization failed: {0}")]
    Factorization(String),

    /// mu is (numerically) proportional to the vector of ones.
    #[error("degenerate efficient frontier: c1*c3 - c2^2 = {gap:e}")]
    DegenerateFrontier { gap: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DynCovError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DynCovError {
    DynCovError::InvalidArgument(msg.into())
}

pub(crate) fn mismatch(msg: impl Into<String>) -> DynCovError {
    DynCovError::DimensionMismatch(msg.into())
}
