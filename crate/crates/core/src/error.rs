//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    /// Every dimension of a batch was filtered out (or fewer than two
    /// survived), so no correlation structure exists to score.
    #[error("degenerate batch: {kept} of {total} dimensions survive variance filtering")]
    DegenerateBatch { kept: usize, total: usize },

    #[error("diagnosis unavailable: {diagnosable} diagnosable modalities, need at least 2")]
    DiagnosisUnavailable { diagnosable: usize },

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("training diverged at epoch {epoch} (seed {seed}): loss is not finite")]
    Diverged { epoch: usize, seed: u64 },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialize(String),
}

/// Failures specific to reading a checkpoint file. Each failure mode has
/// its own variant so callers can tell a stale file from a damaged one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes {found:02x?})")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("shape manifest mismatch for tensor `{tensor}`: expected {expected:?}, found {found:?}")]
    Manifest {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
