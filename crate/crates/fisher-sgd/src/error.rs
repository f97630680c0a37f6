use thiserror::Error;

/// Errors surfaced by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("Jacobi eigensolver did not converge within {max_sweeps} sweeps")]
    EigenNoConvergence { max_sweeps: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("value violates parameter constraint: {0}")]
    ConstraintViolation(String),

    #[error("non-finite log-density at current state of unit {unit}")]
    NonFiniteLogDensity { unit: usize },

    #[error("run diverged: {0}")]
    Diverged(String),

    #[error("restart limit of {max_restarts} exceeded")]
    RestartLimitExceeded { max_restarts: usize },

    #[error("model does not provide capability: {0}")]
    CapabilityMissing(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
