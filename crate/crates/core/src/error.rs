use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation was called in a state where it is not allowed, e.g.
    /// condensing a layer that already finished all stages.
    #[error("state error: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated buffer: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: String, found: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("detection failed: {0}")]
    Detection(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("missing {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
