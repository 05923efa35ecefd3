use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid layer or run configuration (even kernel size, bad toggle, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API precondition (non-scalar loss, consumed tape, T < 2, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Data on disk disagrees with the manifest or header that describes it.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite values first appear in `{module}`")]
    Divergence {
        epoch: usize,
        step: usize,
        module: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

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
