use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or extents that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value or combination that is not allowed.
    #[error("config error: {0}")]
    Config(String),

    /// Model or optimizer state that cannot be used as-is (stale caches,
    /// non-positive variances, non-finite parameters).
    #[error("state error: {0}")]
    State(String),

    /// A computation produced NaN or infinity.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed input while decoding a file or text format.
    #[error("parse error in {field}: {message}")]
    Parse { field: String, message: String },

    /// Volume preprocessing could not be carried out.
    #[error("preprocess error: {0}")]
    Preprocess(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
