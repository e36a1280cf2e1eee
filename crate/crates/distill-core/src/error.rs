//! Error taxonomy shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure kinds raised while loading a checkpoint. Each corruption class is
/// distinguished so callers (and tests) can tell a truncated file from a
/// version or topology problem.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: String, expected: u32 },
    #[error("checkpoint payload truncated: manifest declares {declared} bytes, file holds {actual}")]
    Truncated { declared: usize, actual: usize },
    #[error("checkpoint payload checksum mismatch: the file is corrupted")]
    ChecksumMismatch,
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("checkpoint topology mismatch: {0}")]
    Topology(String),
    #[error("malformed checkpoint manifest: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("rank error in {op}: expected {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("batch of {got} too small for {op}: needs at least {min} rows")]
    BatchSize {
        op: &'static str,
        got: usize,
        min: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("invalid parameter {name}: {message}")]
    Parameter { name: &'static str, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("divergence at epoch {epoch}, step {step}: {context}")]
    Divergence {
        epoch: usize,
        step: usize,
        context: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand used by ops that compare two shapes.
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
