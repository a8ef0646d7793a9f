use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: String, node: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
