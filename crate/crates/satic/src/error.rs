//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A softmax row with every position masked out.
    #[error("degenerate attention row {row}: all positions masked")]
    DegenerateAttentionRow { row: usize },

    /// Cross-entropy over zero non-pad positions.
    #[error("empty loss: every target position is padding")]
    EmptyLoss,

    /// Token id outside the embedding table.
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    /// Backward invoked twice on the same recorded graph.
    #[error("backward already ran on this graph; record a new forward pass first")]
    BackwardAlreadyRan,

    /// Checkpoint container problems (bad magic, version, truncation).
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    /// A parameter expected from the config is absent from the checkpoint.
    #[error("checkpoint missing parameter `{name}`")]
    MissingParameter { name: String },

    /// A checkpoint parameter whose stored shape disagrees with the config.
    #[error("checkpoint parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    /// Bad user input: config values, missing prerequisite artifacts, etc.
    #[error("{0}")]
    Validation(String),

    /// Non-finite loss or other numeric breakdown during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// Process exit code for the CLI: 2 validation, 3 numeric, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
            _ => 2,
        }
    }
}
