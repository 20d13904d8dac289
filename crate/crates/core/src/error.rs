use std::path::PathBuf;

/// Errors raised anywhere in the obfuscation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("invalid model graph: {0}")]
    Graph(String),

    #[error("load error in {location}: {message}")]
    Load { location: String, message: String },

    #[error("extraction error at layer `{layer}`: {message}")]
    Extraction { layer: String, message: String },

    #[error("training aborted at epoch {epoch}, step {step}: {message}")]
    Training {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("ambiguous label: {0}")]
    Ambiguous(String),

    #[error("attack aborted after {iterations} iterations: {message}")]
    Attack { iterations: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    pub(crate) fn load(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Load {
            location: location.into(),
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
