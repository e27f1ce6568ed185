use std::path::PathBuf;

/// Errors produced anywhere in the curation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("rollout failed for task {task_id}: {message}")]
    Rollout { task_id: String, message: String },

    #[error("{role} proposer failed: {message}")]
    Proposer {
        role: &'static str,
        message: String,
        /// Raw backend payload, kept for debugging malformed replies.
        raw: Option<String>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
