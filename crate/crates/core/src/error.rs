use crate::backend::BackendError;
use crate::dataset::DatasetError;
use crate::template::TemplateError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{what}: {source}")]
    Backend {
        what: String,
        #[source]
        source: BackendError,
    },
    #[error("empty probing set: no generation produced a complete sample")]
    EmptyProbingSet,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    pub(crate) fn backend(what: impl Into<String>, source: BackendError) -> Self {
        Error::Backend { what: what.into(), source }
    }

    pub(crate) fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        Error::Io { path: path.display().to_string(), message: err.to_string() }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { source: BackendError::FixtureIncomplete { .. }, .. } => 4,
            Error::Backend { source: BackendError::InvalidParams(_), .. } => 2,
            Error::Backend { .. } => 3,
            Error::EmptyProbingSet => 5,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
