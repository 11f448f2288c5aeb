use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{0} requires a non-empty input")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab: usize,
    },

    #[error("corpus of {len} bytes is shorter than the required {required}")]
    CorpusTooShort { len: usize, required: usize },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{method} scoring requires calibration statistics")]
    MissingStats { method: String },

    #[error("exhaustive search over {count} masks exceeds the limit of {limit}")]
    SearchTooLarge { count: u128, limit: u128 },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed container: {0}")]
    Container(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
