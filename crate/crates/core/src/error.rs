use std::path::PathBuf;

/// Error type shared across the library.
///
/// Variants are grouped by subsystem rather than by call site; every
/// fallible public operation returns `Result<_, CoreError>`.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("audio format error: {0}")]
    AudioFormat(String),

    #[error("lip container error: {0}")]
    LipFormat(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: non-finite {quantity} at step {step}")]
    Diverged { quantity: String, step: u64 },

    #[error("metric error: {0}")]
    Metric(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
