use thiserror::Error;

/// Errors raised by the integration, adjoint and training machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("forward cache does not belong to this model/parameter set")]
    StaleCache,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown scheme '{0}' (expected one of euler, midpoint, bosh3, rk4, dopri5, beuler, cn)")]
    UnknownScheme(String),
    #[error("unknown checkpoint policy '{0}'")]
    UnknownPolicy(String),
    #[error("newton did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonNotConverged { iterations: usize, residual: f64 },
    #[error("gmres did not converge after {iterations} iterations (relative residual {residual:e})")]
    GmresNotConverged { iterations: usize, residual: f64 },
    #[error("gmres breakdown: {0}")]
    GmresBreakdown(&'static str),
    #[error("step size {h:e} fell below minimum at t = {t:e}; stiffness suspected")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("step limit {limit} exceeded at t = {t:e}; stiffness suspected")]
    StepLimit { t: f64, limit: usize },
    #[error("state overflow at t = {t:e}")]
    Overflow { t: f64 },
    #[error("gradient explosion: norm {norm:e}")]
    GradientExplosion { norm: f64 },
    #[error("stage data for step {0} not available; the step must be recomputed")]
    MissingStages(usize),
    #[error("checkpoint capacity {capacity} exceeded")]
    CheckpointCapacity { capacity: usize },
    #[error("checkpoint for step {0} not found")]
    CheckpointMissing(usize),
    #[error("observation time {t:e} is not aligned with a step boundary")]
    Misaligned { t: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
