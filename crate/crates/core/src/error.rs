use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read or write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed corpus file: {0}")]
    Parse(#[from] serde_json::Error),

    /// A corpus invariant is violated; `location` names the dialogue and element.
    #[error("invalid corpus at {location}: {message}")]
    Validation { location: String, message: String },

    #[error("question has {question_len} tokens, which does not fit max_len = {max_len}")]
    QuestionTooLong { question_len: usize, max_len: usize },

    #[error("sequence of {len} tokens exceeds max_len = {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("row {row} of the attention mask is fully masked")]
    AllMaskedRow { row: usize },

    #[error("backward called on a tensor that is not a scalar on this tape")]
    Detached,

    #[error("backward already ran on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("non-finite loss at step {step} (examples: {examples:?})")]
    NonFiniteLoss { step: usize, examples: Vec<String> },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing predictions for {} question(s): {ids:?}", ids.len())]
    MissingPredictions { ids: Vec<String> },

    #[error("infeasible synthetic corpus spec: {0}")]
    InfeasibleSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
