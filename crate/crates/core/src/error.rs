use thiserror::Error;

/// Error type shared across the crate. The variants map onto the CLI
/// exit codes: validation/parse failures exit 2, size caps exit 3 and
/// I/O failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("size cap exceeded: {0}")]
    Cap(String),

    #[error("parse: {0}")]
    Parse(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn cap(msg: impl Into<String>) -> Self {
        Error::Cap(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Parse(_) => 2,
            Error::Cap(_) => 3,
            Error::Io(_) => 4,
        }
    }
}
