use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("point is behind the camera (camera-space z = {z})")]
    BehindCamera { z: f64 },
    #[error("K = {k} neighbors requested but only {available} other points exist")]
    KTooLarge { k: usize, available: usize },
    #[error("neighbor table has {got} rows, cloud has {expected} gaussians")]
    StaleKnn { expected: usize, got: usize },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss diverged at iteration {iter}")]
    DivergedLoss { iter: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
