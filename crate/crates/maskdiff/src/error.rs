//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform to the requested operation.
    Shape(String),
    /// A forward value became NaN/Inf, or training diverged.
    Numerics(String),
    /// A documented precondition was violated by the caller.
    Contract(String),
    /// Invalid configuration value or unparsable config file.
    Config(String),
    /// A mask left no visible tokens; the objective is undefined.
    FullMask,
    /// Malformed checkpoint / tensor / image file.
    Format(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Numerics(m) => write!(f, "numerics error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::FullMask => write!(f, "mask leaves no visible tokens"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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

macro_rules! err_fmt {
    ($variant:ident, $($arg:tt)*) => {
        $crate::error::Error::$variant(format!($($arg)*))
    };
}
pub(crate) use err_fmt;
