use std::fmt;

/// Error type shared across the crate.
///
/// Variants are deliberately coarse: each one maps to a stable class name
/// (see [`Error::class`]) that the CLI uses for its exit codes and for
/// machine-greppable error prefixes.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape mismatch or inconsistent layer geometry.
    Shape(String),
    /// Invalid argument, configuration value or unsupported request.
    Invalid(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed or unsupported file contents.
    Format(String),
    /// Numerical failure: divergence, non-finite values, failed checks.
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Invalid(_) => "invalid",
            Error::Io(_) => "io",
            Error::Format(_) => "format",
            Error::Numeric(_) => "numeric",
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape: {m}"),
            Error::Invalid(m) => write!(f, "invalid: {m}"),
            Error::Io(e) => write!(f, "io: {e}"),
            Error::Format(m) => write!(f, "format: {m}"),
            Error::Numeric(m) => write!(f, "numeric: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
