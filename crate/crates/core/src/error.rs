use std::path::PathBuf;

/// Errors raised by the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or lengths that must agree do not.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A parameter is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A non-finite value appeared during a computation.
    #[error("numeric error at t={t}: {message}")]
    Numeric { t: f64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Short machine-readable category of the error.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Parameter(_) => "parameter",
            Error::Numeric { .. } => "numeric",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
