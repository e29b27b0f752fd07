use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{0}: no records")]
    Empty(PathBuf),

    #[error("image features for item `{item}`: {msg}")]
    Feature { item: String, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cold split: {0}")]
    Split(String),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("non-finite value in `{term}`{}", batch.map(|b| format!(" at batch {b}")).unwrap_or_default())]
    NonFinite { term: String, batch: Option<usize> },

    #[error("item {0} has neither attributes nor image features")]
    MissingContent(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tensor `{tensor}`: expected shape {expected:?}, found {found:?}")]
    Shape {
        tensor: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("unknown variant `{0}` (valid: {valid})", valid = crate::evaluation::Variant::NAMES.join(", "))]
    UnknownVariant(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
