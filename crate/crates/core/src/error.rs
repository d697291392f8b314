//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by volume handling, the correction pipeline, and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("degenerate intensity range: volume is constant")]
    DegenerateIntensityRange,

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),

    #[error("profile length mismatch: {a} vs {b}")]
    ProfileLengthMismatch { a: usize, b: usize },

    #[error("negative regularization strength: {0}")]
    NegativeLambda(f64),

    #[error("insufficient background: {count} voxels (minimum {minimum})")]
    InsufficientBackground { count: usize, minimum: usize },

    #[error("empty mask")]
    EmptyMask,

    #[error("zero variance over mask")]
    ZeroVariance,

    #[error("phase-encoding extent {0} too small for gradient (need >= 3)")]
    PeExtentTooSmall(usize),

    #[error("infeasible gradient bound: max |du/dt| = {0:.3} exceeds 0.5 after rescale")]
    InfeasibleGradientBound(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    NiftiFormat { path: PathBuf, reason: String },
}

impl Error {
    /// Process exit code convention: 1 usage/validation, 2 file I/O or
    /// format, 3 numerical degeneracy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::NiftiFormat { .. } => 2,
            Error::DegenerateIntensityRange
            | Error::ZeroVariance
            | Error::EmptyMask
            | Error::InsufficientBackground { .. }
            | Error::InfeasibleGradientBound(_)
            | Error::NonFinite { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
