use std::fmt;
use std::io;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Notation string did not parse; carries the offending token.
    Parse { input: String, token: String, message: String },
    /// Notation requested more envelope blocks than the canonical set provides.
    UnsupportedEnvelope { requested: usize, max: usize },
    /// Network cannot be expressed in the compact notation.
    NotRepresentable(String),
    /// Architecture document violated the schema; `path` is a JSON pointer.
    Schema { path: String, message: String },
    /// Tensor/graph shape mismatch.
    Shape(String),
    /// Invalid configuration value.
    Config(String),
    /// Dataset file format violation.
    Format(String),
    /// Statistic requested from a record with no observations.
    EmptyRecord(String),
    /// Requested baseline cannot satisfy its structural constraints.
    Infeasible(String),
    /// Checkpoint file corrupt or of an unknown version.
    Checkpoint(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { input, token, message } => {
                write!(f, "cannot parse notation {input:?}: {message} (at {token:?})")
            }
            Error::UnsupportedEnvelope { requested, max } => {
                write!(f, "envelope size {requested} exceeds the {max} canonical block kinds")
            }
            Error::NotRepresentable(msg) => write!(f, "network not representable in notation: {msg}"),
            Error::Schema { path, message } => write!(f, "schema violation at {path}: {message}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::EmptyRecord(msg) => write!(f, "empty record: {msg}"),
            Error::Infeasible(msg) => write!(f, "infeasible: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
