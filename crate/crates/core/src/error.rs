use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input data (feature containers, annotations, datasets) is malformed.
    #[error("{0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Invalid(_) | Error::Config(_) => "config",
            Error::Shape(_) | Error::Data(_) | Error::Parse { .. } | Error::Json(_) => "data",
            Error::NonFinite(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "model",
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::Error::Invalid(format!($($arg)*)) };
}
pub(crate) use invalid;
