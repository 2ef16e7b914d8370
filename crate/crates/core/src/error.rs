use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("barrier function: {0}")]
    Barrier(String),

    #[error("negative variance {value:e} below clamp threshold in {context}")]
    NegativeVariance { value: f64, context: String },

    #[error("moment function is not polynomial of the claimed degree (residual {residual:e})")]
    NotPolynomial { residual: f64 },

    #[error("solver: {0}")]
    Solver(String),

    #[error("simulation diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
