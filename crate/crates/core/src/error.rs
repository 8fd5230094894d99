use std::io;

/// Errors produced anywhere in the reconstruction toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported op in graph: {0}")]
    UnsupportedOp(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("sampling diverged at step {step}")]
    SamplingAborted {
        step: usize,
        trace: Box<crate::sampler::SampleTrace>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
