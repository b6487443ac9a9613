use std::path::PathBuf;

/// Errors raised anywhere in the detector pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on axis {axis}: expected {expected}, got {actual} ({context})")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
        context: String,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("training diverged at iteration {iter}: loss = {loss}")]
    NonFinite { iter: usize, loss: f32 },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(
        axis: &'static str,
        expected: usize,
        actual: usize,
        context: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
            context: context.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
