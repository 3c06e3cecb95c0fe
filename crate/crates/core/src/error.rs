use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the descent library.
#[derive(Debug, Error)]
pub enum UsdError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("invalid bandwidth {0}: must be finite and > 0")]
    InvalidBandwidth(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid particle set: {0}")]
    InvalidParticles(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("factorization failed: {0}")]
    FactorizationFailure(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("all particles were killed during birth-death at step {step}")]
    AllParticlesKilled { step: usize },

    #[error("critic training diverged: objective magnitude {0:e} exceeds 1e8")]
    Diverged(f64),

    #[error("trace holds no snapshots")]
    NoSnapshots,

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("point cloud {} holds no particles", .0.display())]
    EmptySet(PathBuf),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("particle count {got} does not match image size {expected}")]
    CountMismatch { expected: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = UsdError> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(UsdError::DimensionMismatch { expected, got })
    }
}
