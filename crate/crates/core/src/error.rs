use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("solution blew up at t = {time}")]
    BlowUp { time: f64 },

    #[error("tangent basis overflowed after {step} steps; re-orthonormalize more often (smaller ortho_every)")]
    TangentOverflow { step: usize },

    #[error("degenerate tangent space: R[{index},{index}] = {value:e} at QR step {step}")]
    DegenerateTangent { step: usize, index: usize, value: f64 },

    #[error("training diverged at epoch {epoch}")]
    TrainingFailure { epoch: usize },

    #[error("closed-loop prediction diverged at step {step}")]
    Divergence { step: usize },

    #[error("ridge system is singular; use beta > 0")]
    SingularSystem,

    #[error("reservoir generation failed: {0}")]
    Generation(String),

    #[error("hyperparameter search failed: every candidate diverged (scores: {scores:?})")]
    SearchFailure { scores: Vec<f64> },

    #[error("empty {0} subspace")]
    EmptySubspace(&'static str),

    #[error("missing artifact {path}: run `{stage}` first")]
    Dependency { stage: &'static str, path: PathBuf },

    #[error("ensemble member with seed {seed}: {source}")]
    Member { seed: u64, source: Box<Error> },

    #[error("acceptance check failed: {0}")]
    Acceptance(String),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// The innermost error, looking through ensemble-member context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Member { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Failures while reading persisted artifacts.
#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("checksum mismatch")]
    ChecksumMismatch,

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("model kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("malformed file: {0}")]
    Malformed(String),
}
