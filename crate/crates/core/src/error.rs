use std::path::PathBuf;

/// Errors produced anywhere in the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unsupported label {0:?}: only numeric labels can be perturbed")]
    UnsupportedLabel(String),

    #[error("missing history entry: {0}")]
    MissingEntry(String),

    #[error("non-finite gradient: {0}")]
    NonFinite(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
