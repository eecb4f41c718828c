use thiserror::Error;

/// Errors produced by tensor ops, adapter construction, training, and audits.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range {bound} in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("non-finite gradient for parameter '{param}' at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
