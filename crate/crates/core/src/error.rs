use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("QP failure after {iterations} iterations: {reason} (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e}, mu {mu:.3e})")]
    QpFailure {
        reason: String,
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
        mu: f64,
    },

    #[error("no path from start to goal")]
    PathNotFound,

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
