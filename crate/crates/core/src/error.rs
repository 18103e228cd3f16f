use thiserror::Error;

/// Errors raised anywhere in the coarse analysis pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("integrator exceeded {max_steps} steps at t = {t}")]
    StepLimitExceeded { max_steps: usize, t: f64 },

    #[error("integrator step size underflow (h = {h:e}) at t = {t}")]
    StepSizeUnderflow { h: f64, t: f64 },

    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("reference profile is flat (sigma = {sigma:e}); cannot rescale")]
    FlatReference { sigma: f64 },

    #[error("singular Jacobian (condition estimate {condition:e})")]
    SingularJacobian { condition: f64 },

    #[error("Newton did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonNotConverged { iterations: usize, residual: f64 },

    #[error("multiplier undefined: healing derivative {derivative:e} below threshold")]
    DegenerateHealing { derivative: f64 },

    #[error("zero-length secant between consecutive branch points")]
    ZeroSecant,

    #[error("no fold (turning point) found on branch")]
    NoFold,

    #[error("branch is not a graph over [{a}, {b}]: {reason}")]
    NotAGraph { a: f64, b: f64, reason: String },

    #[error("index out of range: {what} = {value}")]
    OutOfRange { what: &'static str, value: i64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
