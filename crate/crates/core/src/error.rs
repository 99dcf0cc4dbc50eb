//! Error type shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// NaN/Inf anywhere is a contract violation; it is raised the moment a
    /// value goes non-finite rather than propagated.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("zero-norm vector in {op}")]
    ZeroNorm { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    /// Test-time optimization blew up; the loss trace up to the failing step
    /// is attached for diagnosis.
    #[error("optimization diverged at step {step}: loss {loss} vs initial {initial}")]
    OptimDiverged {
        step: usize,
        loss: f64,
        initial: f64,
        trace: Vec<f64>,
    },

    #[error("malformed file {path}: {details}")]
    Malformed { path: String, details: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
