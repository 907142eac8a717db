use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {context}: {message}")]
    Shape { context: String, message: String },

    #[error("graph input `{0}` is not bound")]
    UnboundInput(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("graph error at {context}: {message}")]
    Graph { context: String, message: String },

    #[error("loss node {0} is not a scalar (shape {1:?})")]
    NonScalarLoss(usize, Vec<usize>),

    #[error("graph has not been evaluated; call forward first")]
    NotEvaluated,

    #[error("finite-difference check requires double precision")]
    RequiresDoublePrecision,

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn graph(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Graph {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
