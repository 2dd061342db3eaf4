//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Every entry of a gate row was masked, so softmax has no support.
    #[error("invalid gate: {0}")]
    InvalidGate(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    /// The function handed to the gradient checker is not deterministic.
    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint manifest {}: {detail}", path.display())]
    Manifest { path: PathBuf, detail: String },

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch in tensor `{tensor}`")]
    Checksum { tensor: String },

    #[error(
        "length mismatch in tensor `{tensor}`: shape {shape:?} needs {expected} bytes, manifest declares {declared}"
    )]
    Length {
        tensor: String,
        shape: Vec<usize>,
        expected: u64,
        declared: u64,
    },

    #[error("truncated weights file: tensor `{tensor}` ends at byte {end}, file holds {size}")]
    Truncated { tensor: String, end: u64, size: u64 },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error("missing tile from rank {rank}: {detail}")]
    MissingTile { rank: usize, detail: String },

    #[error("overlapping tile: {0}")]
    OverlappingTile(String),

    #[error("replica mismatch for `{tensor}` between rank {first} and rank {second}")]
    ReplicaMismatch {
        tensor: String,
        first: usize,
        second: usize,
    },

    #[error("parallel plan violates {0}")]
    Plan(String),

    #[error("non-finite loss at step {step} (last good step: {last_good:?})")]
    NonFiniteLoss {
        step: usize,
        last_good: Option<usize>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
