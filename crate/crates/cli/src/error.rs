use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or flag combinations.
    #[error("usage error: {0}")]
    Usage(String),

    /// Inputs on disk that cannot be used.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Lib(#[from] lrp3d::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(lrp3d::Error::Numerical(_)) => 3,
            CliError::Data(_) | CliError::Lib(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Lib(lrp3d::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
