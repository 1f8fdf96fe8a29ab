use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {id}: {message}")]
    Invalid { id: String, message: String },

    #[error("{0}")]
    Lexicon(String),

    #[error("context too short: {0}")]
    ContextTooShort(String),

    #[error("no entities")]
    NoEntities,

    #[error("empty mask targets")]
    EmptyTargets,

    #[error("input does not fit: {0}")]
    InputTooLong(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
