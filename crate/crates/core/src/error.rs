use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    #[error("degenerate trajectory: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A computation produced NaN or infinity; `op` names the first offender.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("infeasible geometry: {0}")]
    Infeasible(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
