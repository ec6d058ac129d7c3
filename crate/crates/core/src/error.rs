use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {node}")]
    NonFinite { node: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset {0} holds no PNG images")]
    EmptyDataset(PathBuf),

    #[error("scale mismatch: checkpoint is x{checkpoint}, requested x{requested}")]
    ScaleMismatch { checkpoint: usize, requested: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}, expected \"SPFF\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("malformed config block: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("trailing bytes after last tensor")]
    TrailingBytes,
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
