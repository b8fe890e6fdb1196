use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("no precomputed score for conversation {conversation_id} message {index:?}")]
    MissingScore {
        conversation_id: String,
        /// `None` for a whole-conversation score.
        index: Option<usize>,
    },

    #[error("scorer transport error: {0}")]
    Transport(String),

    #[error("model file has unsupported format version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("cannot load model: {0}")]
    ModelLoad(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the environment (files, network) rather than of
    /// the data or configuration.
    pub fn is_environmental(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Transport(_))
    }
}
