use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("action {action} is not valid for {space}")]
    InvalidAction { action: String, space: String },

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("propensity must lie in (0, 1], got {value} at record {index}")]
    InvalidPropensity { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("estimator undefined: {0}")]
    UndefinedEstimator(String),

    #[error("Fisher information is singular or not positive definite")]
    SingularFisher,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("non-finite gradient at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { epoch: usize, batch: usize },

    #[error("{unconverged} of {total} maximum-likelihood fits did not converge")]
    TooManyUnconverged { unconverged: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
