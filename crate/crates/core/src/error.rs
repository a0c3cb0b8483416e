use std::fmt;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing rate undefined: {0}")]
    UndefinedRate(String),

    #[error("{0}")]
    Parse(ParseError),

    #[error("referential integrity violated: {}", .0.join("; "))]
    Integrity(Vec<String>),

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A syntax or schema error located in an input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub source: String,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "parse error in {} at line {}, column {}: {}",
            self.source, self.line, self.column, self.message
        )
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn from_json(source: &str, err: serde_json::Error) -> Self {
        Error::Parse(ParseError {
            source: source.to_string(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
