use std::fmt;

/// Errors raised by the library. The CLI maps each kind onto an exit code.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not agree.
    Shape(String),
    /// An id or index is outside its valid range.
    Index(String),
    /// A caller violated an operation precondition.
    Contract(String),
    /// Malformed template or pair text.
    Format(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// A segment offset exceeds the position base.
    PositionOverflow { seg_id: usize, offset_id: usize, base: usize },
    /// A NaN or infinity appeared where finite values are required.
    NonFinite(String),
    /// Checkpoint could not be decoded or does not match the expected model.
    Checkpoint { field: String, message: String },
    /// Input data problem (empty corpus, unusable example set).
    Data(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "dimension error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::PositionOverflow { seg_id, offset_id, base } => write!(
                f,
                "position overflow: offset {offset_id} in segment {seg_id} exceeds base {base}"
            ),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Checkpoint { field, message } => {
                write!(f, "checkpoint error [{field}]: {message}")
            }
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
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

pub(crate) fn ckpt_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Checkpoint { field: field.into(), message: message.into() }
}
