use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not fit the operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A hyper-parameter or argument is out of its legal range.
    #[error("invalid parameter `{name}`: {detail}")]
    Parameter { name: String, detail: String },

    /// A caller broke an API precondition (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed XML at byte {offset}: {detail}")]
    XmlParse { offset: u64, detail: String },

    #[error("annotation schema error: missing or invalid field `{field}`")]
    Schema { field: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("weight file error: {0}")]
    WeightFile(String),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("CSV error in {path}: {detail}")]
    Csv { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn param(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Parameter { name: name.into(), detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
