use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("pool error: k={k} exceeds sequence length {len}")]
    Pool { k: usize, len: usize },

    #[error("input too short: length {len} < filter height {height}")]
    InputTooShort { len: usize, height: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("{path}:{line}: {msg}")]
    Validation {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("synthetic spec error: {0}")]
    Spec(String),

    #[error("checkpoint format error in {field}: {detail}")]
    Format { field: String, detail: String },

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("training aborted at batch {batch}: non-finite loss (largest |grad| in {param})")]
    NumericAbort { batch: usize, param: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
