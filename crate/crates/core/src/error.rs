use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the rank-search pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown parameter: node {0} is not a leaf on this tape")]
    UnknownParameter(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: missing column `{0}`")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-parsable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Domain(_) => "domain",
            Error::UnknownParameter(_) => "unknown-parameter",
            Error::Numeric(_) => "numeric",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
        }
    }
}
