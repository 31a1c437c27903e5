use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value violates its invariants.
    #[error("config error: {0}")]
    Config(String),

    /// A caller broke an operation precondition (non-scalar loss, image smaller than a window, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A forward value or loss became NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Dataset is unusable (empty manifest, undersized images, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint or manifest file is malformed.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
