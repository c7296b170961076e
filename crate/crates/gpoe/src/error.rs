use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A file that does not follow its binary layout.
    #[error("{path}: invalid {format} file at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        format: &'static str,
        offset: u64,
        message: String,
    },

    #[error(transparent)]
    Core(#[from] gpoe_core::Error),

    /// Some sweep cells failed; the others were written.
    #[error("{failed} of {total} sweep cells failed")]
    Partial { failed: usize, total: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 1 partial sweep failure, 2 usage or input
    /// problems, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Partial { .. } => 1,
            Error::Core(gpoe_core::Error::Numeric(_)) => 3,
            _ => 2,
        }
    }
}
