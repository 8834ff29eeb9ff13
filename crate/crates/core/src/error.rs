use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum DailError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown instruction id {id} (mapping has {count} instructions)")]
    UnknownInstruction { id: usize, count: usize },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("no path to goal within the remaining steps")]
    NoPath,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value in parameter `{0}`")]
    Numeric(String),
    #[error("degenerate embedding: zero-norm vector")]
    DegenerateEmbedding,
    #[error("contrastive batch has no negative pairs")]
    NoNegatives,
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DailError> = std::result::Result<T, E>;

impl DailError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DailError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DailError::Io {
            path: path.into(),
            source,
        }
    }
}
