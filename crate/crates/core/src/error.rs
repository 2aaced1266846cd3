use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NonConvergence { estimate: f64, iterations: usize },

    #[error("could not draw a full-rank {rows}x{cols} sample after {attempts} attempts")]
    RankDeficient {
        rows: usize,
        cols: usize,
        attempts: usize,
    },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error in {what} at byte {offset}: {message}")]
    Format {
        what: String,
        offset: u64,
        message: String,
    },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(what: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
