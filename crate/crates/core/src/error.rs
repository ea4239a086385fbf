//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("parameter `{name}` is not estimable (no admissible interval registered)")]
    NotEstimable { name: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("step size underflow at t = {t:.6e} (dt = {dt:.3e} < dt_min)")]
    StepSizeUnderflow { t: f64, dt: f64 },

    #[error("maximum step count {max_steps} exceeded at t = {t:.6e}")]
    MaxStepsExceeded { t: f64, max_steps: usize },

    #[error("missing channel `{0}`")]
    MissingChannel(String),

    #[error("sample grid mismatch: {0}")]
    GridMismatch(String),

    #[error("covariance matrix for channel `{channel}` is not positive definite")]
    CovarianceNotPositiveDefinite { channel: String },

    #[error("all {0} optimization runs failed")]
    AllRunsFailed(usize),

    #[error("too many failed model evaluations: {failed}/{total} (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error("divergent sampler start: every initial transition diverged")]
    DivergentStart,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
