//! Error type shared by all modules.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unknown tensor: {0}")]
    Lookup(String),
    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("rank out of range: {0}")]
    Rank(String),
    #[error("second moment needs at least one activation row")]
    EmptySample,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no preset for overall budget {0}; presets are 0.90, 0.80 and 0.50 — pass --modules-from-end and --module-budget for other budgets")]
    NoPreset(f64),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("module {module} slot {slot}: {source}")]
    At {
        module: usize,
        slot: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Annotate an error with the (module, slot) it occurred in.
    pub fn at(self, module: usize, slot: &'static str) -> Self {
        Error::At { module, slot, source: Box::new(self) }
    }

    /// Process exit status for the CLI: 2 for I/O and file-format problems,
    /// 1 for everything else (validation, numerics, verification).
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Io { .. } | Error::Format(_) | Error::Integrity(_) => 2,
            Error::At { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
