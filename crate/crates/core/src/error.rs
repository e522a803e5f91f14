use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SegError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("lookup out of range: id {id} in table of {len} rows")]
    Lookup { id: usize, len: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("vocabulary mismatch: checkpoint {expected}, data {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl SegError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SegError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad input (flags, configs, data files) as opposed to
    /// failures during computation or I/O.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            SegError::Config(_)
                | SegError::Data(_)
                | SegError::Parse { .. }
                | SegError::Usage(_)
                | SegError::VocabMismatch { .. }
                | SegError::Json(_)
        )
    }
}
