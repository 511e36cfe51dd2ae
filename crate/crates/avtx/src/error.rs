//! Errors of the std layer: file formats, IO and the wrapped core errors.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] avtx_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A file does not follow its documented layout.
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
    /// The command line or run configuration cannot be used.
    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Core(e) => match e {
                avtx_core::Error::Dimension(_) => "dimension",
                avtx_core::Error::Config(_) => "config",
                avtx_core::Error::Input(_) => "input",
                avtx_core::Error::Contract(_) => "contract",
                avtx_core::Error::Sync(_) => "sync",
                avtx_core::Error::NonFinite(_) => "non-finite",
                avtx_core::Error::Training { .. } => "training",
            },
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Wav { .. } => "wav",
            Error::Usage(_) => "usage",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Error {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
