use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad tensor magic {0:?}, expected \"IMT1\"")]
    BadMagic([u8; 4]),

    #[error("truncated tensor: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("tensor dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: &'static str, found: &'static str },

    #[error("unknown tensor dtype code {0}")]
    UnknownDtype(u32),

    #[error("class id {id} out of range ({classes} labels allowed)")]
    ClassOutOfRange { id: u32, classes: u32 },

    #[error("channel count mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("backend failure: {0}")]
    Backend(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by an external or builtin segmenter backend.
    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend(_))
    }
}
