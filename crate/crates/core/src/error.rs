use std::path::PathBuf;

use thiserror::Error;
use vidsynth_tensor::TensorError;

/// Broad failure classes, used by the command line to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error("no manifest in {}", .0.display())]
    NoManifest(PathBuf),
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown class id {0}")]
    UnknownClass(u8),
    #[error("mask value {value} outside [0, 1]")]
    MaskRange { value: f64 },
    #[error("non-finite {component} at iteration {iteration}")]
    NonFinite { component: String, iteration: u64 },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint {} is truncated: {msg}", path.display())]
    Truncated { path: PathBuf, msg: String },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Tensor(_) => ErrorKind::Usage,
            Error::NoManifest(_)
            | Error::Data { .. }
            | Error::Io { .. }
            | Error::UnknownClass(_)
            | Error::Version { .. }
            | Error::Truncated { .. } => ErrorKind::Data,
            Error::MaskRange { .. } | Error::NonFinite { .. } | Error::Numerical(_) => {
                ErrorKind::Numerical
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
