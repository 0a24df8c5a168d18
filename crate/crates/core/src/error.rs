use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected} but got {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{op}: input contains non-finite values")]
    NonFinite { op: &'static str },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("{path}: bad magic bytes (not a {expected} file)")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found:?}, expected {expected:?}")]
    VersionMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: file is truncated ({context})")]
    Truncated { path: PathBuf, context: String },

    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    ChecksumMismatch {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: malformed contents: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("model variant mismatch: requested {expected}, file holds {found}")]
    VariantMismatch { expected: String, found: String },

    #[error("{path}: stored shape {found:?} does not match the manifest's {expected:?}")]
    BlobShape {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dataset blob {name} is missing from {dir}")]
    MissingBlob { name: String, dir: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used to pick process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Caller supplied an invalid argument or mismatched shapes.
    Usage,
    /// A model, dataset or image file could not be read or is corrupt.
    Format,
    /// Divergence or a failed numerical check.
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::ShapeMismatch { .. } | Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::NonFinite { .. } | Error::Divergence { .. } => ErrorKind::Numerical,
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::ChecksumMismatch { .. }
            | Error::Malformed { .. }
            | Error::VariantMismatch { .. }
            | Error::BlobShape { .. }
            | Error::MissingBlob { .. }
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json(_) => ErrorKind::Format,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
