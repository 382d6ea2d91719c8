use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate epipolar line (A^2 + B^2 <= 1e-18)")]
    DegenerateLine,
    #[error("softmax row has no finite entry")]
    EmptyRow,
    #[error("config error: {0}")]
    Config(String),
    #[error("at least one context frame is required")]
    MissingContext,
    #[error("too many context frames: {0} (max {1})")]
    TooManyContext(usize, usize),
    #[error("video too short for context sampling: {0}")]
    InsufficientContext(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("parse error in {file}: line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
