//! Crate-wide error type.

use std::io;

/// Errors surfaced by the library. Variants map one-to-one onto the failure
/// modes of the public operations so callers (and the CLI exit-code mapping)
/// can match on them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm is zero (or below 1e-12)")]
    ZeroNorm,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("function evaluation produced a non-finite value")]
    NonFiniteEvaluation,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("could not sample {0} separated identities after 10000 attempts")]
    SeparationUnsatisfiable(usize),
    #[error("unknown identity {0}")]
    UnknownIdentity(usize),
    #[error("too few identities: {0}")]
    TooFewIdentities(String),
    #[error("bad architecture: {0}")]
    BadArchitecture(String),
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("backward called without a matching train-mode forward cache")]
    StaleCache,
    #[error("episode has no negatives")]
    NoNegatives,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("insufficient frames: need {needed}, have {available}")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("AUC needs both classes present")]
    OneClassOnly,
    #[error("division by zero: {0}")]
    DivisionByZero(&'static str),
    #[error("vector is not unit norm (norm {0})")]
    NotUnitNorm(f64),
    #[error("could not satisfy sampling hypotheses after {0} attempts")]
    InfeasibleSampling(usize),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("truncated input: {0}")]
    Truncated(&'static str),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("stream has no handshake frame")]
    NoHandshake,
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
