use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("not a flo file: {}", .0.display())]
    NotFlo(PathBuf),

    #[error("corrupt flo: {0}")]
    CorruptFlo(String),

    #[error("malformed pnm header: {0}")]
    PnmHeader(String),

    #[error("checkpoint bad magic: expected \"PYFL\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("checkpoint version mismatch: expected 1, found {0}")]
    VersionMismatch(u32),

    #[error("checkpoint crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("missing prediction file: {}", .0.display())]
    MissingPrediction(PathBuf),

    #[error("resolution mismatch: expected {expected:?}, found {found:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

/// Coarse error classes, used by the command line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Shape(_) => ErrorKind::Config,
            Error::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    /// Short machine-readable tag for the error variant.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Io { .. } => "io",
            Error::NotFlo(_) => "not-flo",
            Error::CorruptFlo(_) => "corrupt-flo",
            Error::PnmHeader(_) => "pnm-header",
            Error::BadMagic(_) => "bad-magic",
            Error::VersionMismatch(_) => "version-mismatch",
            Error::CrcMismatch { .. } => "crc-mismatch",
            Error::CorruptCheckpoint(_) => "corrupt-checkpoint",
            Error::MissingPrediction(_) => "missing-prediction",
            Error::ResolutionMismatch { .. } => "resolution-mismatch",
            Error::Dataset(_) => "dataset",
            Error::Numeric(_) => "numeric",
        }
    }
}
