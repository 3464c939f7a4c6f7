use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CueError>;

#[derive(Debug, Error)]
pub enum CueError {
    #[error("malformed corpus line {line} in {path}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("duplicate document id `{id}` (line {line})")]
    DuplicateDocId { id: String, line: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vocabulary too small: max_size {max_size} < {reserved} reserved tokens")]
    VocabTooSmall { max_size: usize, reserved: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("insufficient documents: requested {requested}, have {available}")]
    InsufficientDocuments { requested: usize, available: usize },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("checkpoint `{path}` is incompatible: {reason}")]
    IncompatibleCheckpoint { path: String, reason: String },

    #[error("context mode `{mode}` incompatible with ensemble: {reason}")]
    IncompatibleMode { mode: String, reason: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}; last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        batch: usize,
        last_good: Option<PathBuf>,
    },

    #[error("i/o error on {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl CueError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CueError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        CueError::Json {
            context: context.into(),
            source,
        }
    }
}
