//! Error taxonomy shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or matrix operand had the wrong shape for the requested op.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument was outside its documented domain.
    #[error("bad argument in {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    /// A configuration value (or combination) is unusable.
    #[error("invalid config: {0}")]
    Config(String),

    /// A numerical routine could not produce a trustworthy answer
    /// (singular system, non-finite intermediate, ...).
    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    /// Values left the representable range of the active precision format.
    #[error("overflow at {site}: {count} value(s) beyond ±{max_abs:e}")]
    Overflow {
        site: String,
        count: usize,
        max_abs: f64,
    },

    /// A persisted artifact (checkpoint, manifest) failed validation.
    #[error("integrity: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn argument(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument {
            op,
            detail: detail.into(),
        }
    }

    pub fn numerical(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
