use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel family {0:?} has no derivative covariance")]
    UnsupportedFamily(crate::gp::KernelFamily),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite ELBO at iteration {iteration}")]
    NonFiniteElbo { iteration: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Sobol dimension {0} exceeds the {max} shipped direction-number sets", max = crate::sobol::MAX_DIMENSION)]
    UnsupportedDimension(usize),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// The trial budget is spent; no further stimuli will be proposed.
    #[error("experiment finished")]
    Finished,

    #[error("replay diverged at log entry {index}: {detail}")]
    ReplayDivergence { index: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
