use std::path::PathBuf;

/// Errors produced by the matting toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint schema error: {0}")]
    Schema(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("tile plan error: {0}")]
    Plan(String),

    #[error("session {0} not found")]
    NotFound(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code, used by the HTTP layer.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Validation(_) => "validation",
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::Schema(_) => "schema",
            Error::Generation(_) => "generation",
            Error::Plan(_) => "plan",
            Error::NotFound(_) => "not_found",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}
