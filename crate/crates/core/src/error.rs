use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument fell outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// Shapes, counts or other structural preconditions did not hold.
    #[error("input error: {0}")]
    Input(String),
    /// A forward or backward computation produced NaN or infinity.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("parse error at {file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
