use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure in {what} (residual {residual:e})")]
    NumericalFailure { what: String, residual: f64 },

    /// All singular values of the gradient matrix fell below the rank
    /// tolerance; the caller must skip the parameter update for this batch.
    #[error("degenerate gradient: no singular value above the rank tolerance")]
    DegenerateGradient,

    #[error("degenerate loss history: {0}")]
    DegenerateHistory(String),

    /// A metric that cannot be evaluated on this input (zero variance,
    /// constant truth, empty reference set). Excluded from aggregation.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
