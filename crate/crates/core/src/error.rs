use std::path::PathBuf;

use crate::trainer::RunRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid parameter `{name}`: {msg}")]
    Parameter { name: &'static str, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {what}: expected {expected}, found {found}")]
    Format {
        what: String,
        expected: String,
        found: String,
    },

    #[error("length error in {what}: expected {expected} bytes, found {found}")]
    Length {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}: {cause}")]
    Diverged {
        epoch: usize,
        cause: String,
        record: Box<RunRecord>,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, msg: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Checks a retain probability lies in (0, 1].
pub(crate) fn check_retain(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::param("p", format!("{p} is outside (0, 1]")))
    }
}
