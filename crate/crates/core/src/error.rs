use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or missing configuration (empty parcel set, bad scenario, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller passed an argument outside an operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input file content could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A factorization or other numerical step failed.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
