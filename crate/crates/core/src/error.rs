use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// The CLI maps these onto process exit codes with [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("row {row} has near-zero norm {norm:e}; refusing to normalize")]
    DegenerateRow { row: usize, norm: f64 },

    #[error("batch of size {batch} has no negatives (need at least 2 pairs)")]
    NoNegatives { batch: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("stale forward tape: {0}")]
    StaleTape(String),

    #[error("config error for `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 config, 3 data/format, 4 numerical abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Format { .. } | Error::Io(_) | Error::Shape { .. } => 3,
            Error::Numerical(_) | Error::DegenerateRow { .. } => 4,
            _ => 1,
        }
    }
}
