use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Cholesky factorisation hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    Decomposition { pivot: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The state of an SDE integration became non-finite.
    #[error("simulation diverged at step {step}")]
    Simulation { step: usize },

    #[error("training failed at iteration {iteration}: {reason}")]
    Training { iteration: u64, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
