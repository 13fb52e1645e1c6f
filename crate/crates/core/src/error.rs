use thiserror::Error;

/// Errors raised anywhere in the control pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("control region unsupported: {0}")]
    RegionUnsupported(String),

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("time node {t} lies on the boundary of (0, {horizon})")]
    TimeNodeOnBoundary { t: f64, horizon: f64 },

    #[error("diffusion coefficient is not positive (min = {min})")]
    NonpositiveCoefficient { min: f64 },

    #[error("bad Lebesgue exponent {0}")]
    BadExponent(f64),

    #[error("bad exponents for q-ladder: n = {n_dim}, q = {q_final}")]
    BadExponents { n_dim: usize, q_final: f64 },

    #[error("interval [{lo}, {hi}] is outside the model's valid range [{range_lo}, {range_hi}]")]
    IntervalOutsideRange {
        lo: f64,
        hi: f64,
        range_lo: f64,
        range_hi: f64,
    },

    #[error("Newton iteration diverged at layer {layer} (residual {residual:e})")]
    NewtonDiverged { layer: usize, residual: f64 },

    #[error("linear solve stalled after {iterations} iterations (relative residual {residual:e})")]
    LinearSolveStalled { iterations: usize, residual: f64 },

    #[error("minimization hit the iteration cap ({iterations}) with relative gradient {gradient:e}")]
    MaxIterations { iterations: usize, gradient: f64 },

    #[error("fixed-point loop did not converge after {iterations} iterations (last sup-distance {distance:e})")]
    NoConvergence { iterations: usize, distance: f64 },

    #[error("power-law fit is degenerate: {0}")]
    FitDegenerate(String),

    #[error("invalid configuration field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("diagnostic violation: {0}")]
    DiagnosticViolation(String),

    #[error("malformed field file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
