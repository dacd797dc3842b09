use thiserror::Error;

/// Errors raised by the solvers and checks in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },

    #[error("non-finite evaluation of {what} at t={t}, x={x}")]
    NonFiniteEvaluation { what: &'static str, t: f64, x: f64 },

    #[error("scheme diverged at t={t}: {detail}")]
    SchemeDiverged { t: f64, detail: String },

    #[error("initial density has only {mass:.6} of its mass on the grid (need >= 0.999)")]
    MassDeficit { mass: f64 },

    #[error("score field has no valid node (density below floor everywhere)")]
    AllMasked,

    #[error("push-forward needs at least {needed} alive particles, got {got}")]
    TooFewParticles { needed: usize, got: usize },

    #[error("map is not monotone on the grid (derivative changes sign near x={x})")]
    NotMonotone { x: f64 },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("control grid is empty")]
    EmptyControlGrid,

    #[error("PSOR stalled at t={t}: residual {residual:e} after {iters} iterations")]
    PsorStalled { t: f64, residual: f64, iters: usize },

    #[error("root not bracketed on [{lo}, {hi}]")]
    RootNotBracketed { lo: f64, hi: f64 },

    #[error("sweep did not converge after {iters} iterations (max residual {residual:e})")]
    NotConverged { iters: usize, residual: f64 },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl SolverError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        SolverError::InvalidArgument {
            field,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for SolverError {
    fn from(e: std::io::Error) -> Self {
        SolverError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SolverError>;
