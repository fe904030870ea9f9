use thiserror::Error;

/// Errors produced by the learning pipeline and its building blocks.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("unsupported score order {order} for family {family}")]
    UnsupportedOrder { family: &'static str, order: usize },

    #[error("transform is not invertible at coordinate {coordinate}: derivative {derivative:e}")]
    SingularTransform { coordinate: usize, derivative: f64 },

    #[error("Gauss-Hermite quadrature did not converge: error bound {bound:e} at order {order}")]
    QuadratureNonConvergence { bound: f64, order: usize },

    #[error("ill-conditioned whitening slice: eigenvalue ratio {ratio:e}")]
    IllConditionedSlice { ratio: f64 },

    #[error("whitening failed after {attempts} slice draws")]
    WhiteningRetriesExhausted { attempts: usize },

    #[error("power iteration reached a dead point: |T(I,a,a)| = {norm:e}")]
    DeadPoint { norm: f64 },

    #[error("recovered {found} of {requested} components")]
    UnderRecovery {
        found: usize,
        requested: usize,
        partial: Box<crate::decomposition::DecompositionResult>,
    },

    #[error("rejection sampling budget of {0} draws exhausted")]
    RejectionBudget(usize),

    #[error("{failed} of {total} sweep trials failed")]
    SweepFailed { failed: usize, total: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(String),

    #[error("json error: {0}")]
    Json(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
