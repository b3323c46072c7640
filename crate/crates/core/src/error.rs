use thiserror::Error;

/// Errors raised by the design, estimation and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("action index {index} out of range for {count} actions")]
    ActionOutOfRange { index: usize, count: usize },

    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("budget {n} too small: need at least {min}")]
    BudgetTooSmall { n: usize, min: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
