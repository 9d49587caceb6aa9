use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// `p` and `q` coincide, so there is no residual mass to resample from.
    #[error("degenerate residual: target and draft distributions are identical")]
    DegenerateResidual,

    #[error("token id {id} out of range for id space of {limit}")]
    TokenOutOfRange { id: usize, limit: usize },

    #[error("position {position} exceeds maximum position {max}")]
    PositionOverflow { position: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("checkpoint malformed: {0}")]
    Malformed(String),

    #[error("invalid tree topology: {0}")]
    Topology(String),

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
