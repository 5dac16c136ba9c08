use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("ambient dimension must be at least 2 (got {0})")]
    DimensionTooSmall(usize),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance is not factorisable even with jitter {max_jitter:e}")]
    NotFactorisable { max_jitter: f64 },

    #[error("order parameters are not realisable: {0}")]
    NotRealisable(String),

    #[error("neuron {0} has zero norm; geometry is undefined")]
    ZeroNorm(usize),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("step {step} is out of range for a schedule of length {len}")]
    StepOutOfRange { step: usize, len: usize },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
