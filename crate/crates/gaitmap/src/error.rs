use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes:
/// validation/config/parse -> 2, I/O -> 3, numeric failure -> 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Data(_)
            | Error::Config(_) => 2,
            Error::Io(_) | Error::Json(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
