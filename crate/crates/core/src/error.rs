//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor construction or op with inconsistent shapes.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Backward produced a NaN; `op` is the first node where it appeared.
    #[error("NaN gradient produced by op {op}")]
    NanGradient { op: &'static str },

    /// A forward evaluation produced a non-finite value where a finite one is
    /// required (e.g. the scalar under a finite-difference probe).
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Input outside what the model/tokenizer was built for.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Checkpoint or attribution file did not parse.
    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    /// Checkpoint config incompatible with what the caller expects.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Anything the pipeline rejects at a higher level (bad experiment
    /// config, missing artifact, inconsistent corpus, ...).
    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
