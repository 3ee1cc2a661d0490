//! Crate-wide error type. Variants map one-to-one onto the CLI exit-code
//! contract: Usage -> 1, Io -> 2, Format -> 3, Numeric -> 4.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Bad invocation: unknown flag, missing argument, invalid value.
    Usage(String),
    /// Filesystem / OS failure.
    Io(String),
    /// Malformed file contents, bad magic, version or digest mismatch.
    Format(String),
    /// Numeric failure: non-finite values, degenerate fits, no overlap.
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Io(_) => 2,
            Error::Format(_) => 3,
            Error::Numeric(_) => 4,
        }
    }

    pub fn io_path(context: &str, path: &std::path::Path, e: std::io::Error) -> Error {
        Error::Io(format!("{context} {}: {e}", path.display()))
    }
}
