use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config {}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("{}:{line}: {msg}", path.display())]
    Data { path: PathBuf, line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] adafish::Error),

    #[error("{failed} verification check(s) failed")]
    VerifyFailed { failed: usize },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        HarnessError::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit status: 1 usage, 2 configuration or input data, 4 failed
    /// verification. Diverged runs are not errors; see `RunStatus`.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Config { .. } | HarnessError::Data { .. } => 2,
            HarnessError::VerifyFailed { .. } => 4,
            HarnessError::Io { .. } | HarnessError::Core(_) => 1,
        }
    }
}
