use std::io;
use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] logra_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// Bad magic, unsupported version, truncation or an inconsistent layout.
    #[error("{}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Artifacts that were not derived from each other were combined.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("duplicate data id {0}")]
    DuplicateId(u64),

    #[error("unknown data id {0}")]
    UnknownId(u64),

    #[error("payload has {found} values, schema expects {expected}")]
    PayloadLength { expected: usize, found: usize },

    #[error("csv {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the command line: 2 for configuration problems,
    /// 3 for missing or mismatched artifacts, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Csv { .. } => 2,
            Error::Core(logra_core::Error::InvalidArgument(_)) => 2,
            Error::Core(_) => 4,
            Error::Io { .. }
            | Error::Corrupt { .. }
            | Error::Mismatch(_)
            | Error::DuplicateId(_)
            | Error::UnknownId(_)
            | Error::PayloadLength { .. } => 3,
        }
    }
}
