use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("timestep too large: non-finite coordinates at step {step}")]
    TimestepTooLarge { step: usize },

    #[error("matrix is not row-stochastic: row {row} sums to {sum}")]
    NotStochastic { row: usize, sum: f64 },

    #[error("eigensolver did not converge within {max_iter} iterations")]
    NoConvergence { max_iter: usize },

    #[error("degenerate eigenvector geometry: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Non-finite loss or gradient during training. `last_good` is the state
    /// just before the failing step.
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String, last_good: Box<crate::seqmodel::Checkpoint> },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
