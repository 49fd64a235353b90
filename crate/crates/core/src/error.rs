use std::path::PathBuf;

/// Errors produced anywhere in the inference and benchmarking stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid CSR structure: {0}")]
    Csr(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing quantization parameters: {0}")]
    MissingQuant(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("model error in layer {layer}: {reason}")]
    Layer { layer: usize, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("timer failure: {0}")]
    Timer(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn layer(layer: usize, reason: impl Into<String>) -> Self {
        Error::Layer { layer, reason: reason.into() }
    }
}
