use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value while evaluating {0}")]
    NonFinite(String),

    #[error("training diverged in {phase} at epoch {epoch}")]
    Divergence { phase: String, epoch: usize },

    #[error("unpaired batches: {image_rows} image rows vs {text_rows} text rows")]
    Pairing { image_rows: usize, text_rows: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("format error in {path} at line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u8, expected: u8 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Prefix the phase name onto a divergence error raised deeper in the stack.
    pub(crate) fn in_phase(self, phase: &str) -> Self {
        match self {
            Error::Divergence {
                phase: inner,
                epoch,
            } => Error::Divergence {
                phase: format!("{phase}/{inner}"),
                epoch,
            },
            other => other,
        }
    }
}
