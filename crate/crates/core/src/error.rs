use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Integrity failures when decoding the binary payload files.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("unknown magic header {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("file truncated: header promises {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("{0} unexpected trailing bytes after the last record")]
    TrailingBytes(u64),
    #[error("dimension mismatch: file has {found} dims, profile expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in record {record}")]
    NonFinite { record: usize },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("profile mismatch: {0}")]
    ProfileMismatch(String),
    #[error(
        "no candidate regions survived filtering ({raw} raw, {after_size} after size filter, \
         {after_edges} after edge filter)"
    )]
    EmptyIndex { raw: usize, after_size: usize, after_edges: usize },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    FormatData(#[from] FormatError),
    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}
