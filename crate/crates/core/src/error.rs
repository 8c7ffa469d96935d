use std::path::PathBuf;

/// Errors produced by the reconstruction toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("non-finite value in {stage}")]
    NonFinite { stage: String },

    #[error("non-finite activation at layer {layer}")]
    NumericLayer { layer: usize },

    #[error("checksum mismatch in {path}: stored {stored:016x}, computed {computed:016x}")]
    Checksum { path: PathBuf, stored: u64, computed: u64 },

    #[error("architecture mismatch: expected `{expected}`, found `{found}`")]
    Architecture { expected: String, found: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("logic error: {0}")]
    Logic(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding error: {0}")]
    Encode(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
