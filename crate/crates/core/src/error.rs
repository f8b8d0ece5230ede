use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid geometry: {0}")]
    InvalidGeometry(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("volume contains a non-finite value at voxel {0}")]
    NonFinite(usize),

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("integration failed at shell {shell}, step {step}: {reason}")]
    IntegrationFailure {
        shell: usize,
        step: usize,
        reason: String,
    },

    #[error("singular matrix (det = {0:e})")]
    Singular(f64),

    #[error("point {0:?} lies outside the domain")]
    OutsideDomain([f64; 3]),

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("coupling graph is disconnected")]
    Disconnected,

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    #[error("quadrature too coarse: {0}")]
    QuadratureTooCoarse(String),

    #[error("degenerate profile: {0}")]
    DegenerateProfile(String),

    #[error("warp parameters out of bounds: {0}")]
    WarpOutOfBounds(String),

    #[error("warp inversion did not converge at {point:?} (residual {residual:e})")]
    InverseNoConvergence { point: [f64; 3], residual: f64 },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;
