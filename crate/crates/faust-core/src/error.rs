use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// An argument violated a documented precondition.
    Argument(String),
    /// A file did not match the expected on-disk format.
    Format(String),
    /// A file parsed but its contents are internally inconsistent.
    Consistency(String),
    /// A run configuration failed validation; `field` names the offender.
    Config { field: String, message: String },
    /// A dataset violated an invariant (empty class, bad label, ...).
    Dataset(String),
    /// A checkpoint could not be read or does not match its consumer.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Argument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Consistency(msg) => write!(f, "consistency error: {msg}"),
            Error::Config { field, message } => write!(f, "config error in `{field}`: {message}"),
            Error::Dataset(msg) => write!(f, "dataset error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
