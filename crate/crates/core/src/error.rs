use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty event sequence")]
    EmptySequence,

    #[error("cannot split sequence: {0}")]
    Split(String),

    #[error("invalid bin grid: {0}")]
    InvalidGrid(String),

    #[error("cannot sample test instances: {0}")]
    InstanceSampling(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("mark {mark} out of range for vocabulary of size {size}")]
    Vocab { mark: u32, size: usize },

    #[error("event at t={time} precedes last consumed event at t={last}")]
    Ordering { time: f64, last: f64 },

    #[error("infeasible bin problem: {0}")]
    Infeasible(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-stationary Hawkes parameters: alpha={alpha} must be below beta={beta}")]
    NonStationary { alpha: f64, beta: f64 },

    #[error("insufficient history: {0}")]
    Features(String),

    #[error("model mismatch: {0}")]
    Mismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
