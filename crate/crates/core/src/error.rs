use std::path::PathBuf;

/// Error type shared by all pipeline modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("timestamp ordering violated: {0}")]
    Ordering(String),
    #[error("coordinate out of bounds: {0}")]
    Bounds(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("fusion weight error: {0}")]
    Weight(String),
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("dataset integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint error: {0}")]
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

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
