use thiserror::Error;

use crate::geometry::GeometryError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("parse error in field '{field}': {msg}")]
    Parse { field: String, msg: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },
    #[error("baseline unavailable: {0}")]
    BaselineUnavailable(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse { field: field.into(), msg: msg.into() }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Geometry(GeometryError::Io(_)) => 4,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::Geometry(GeometryError::Parse { .. })
            | Error::Geometry(GeometryError::Validation(_)) => 2,
            _ => 3,
        }
    }
}
