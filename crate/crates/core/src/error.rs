use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("annotation out of bounds: {0}")]
    OutOfBounds(String),

    #[error("could not place {requested} instances after {attempts} attempts (placed {placed})")]
    PlacementFailed {
        requested: usize,
        placed: usize,
        attempts: usize,
    },

    #[error("adapters are already inserted")]
    AdaptersPresent,

    #[error("adapt mode requires adapters to be inserted")]
    AdaptersMissing,

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("unknown job {0}")]
    UnknownJob(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
