use thiserror::Error;

pub type Result<T, E = IcmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IcmError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("incompatible format: {0}")]
    Incompatible(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl IcmError {
    pub(crate) fn dim(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        IcmError::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        IcmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
