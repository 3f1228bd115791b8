use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("analytic kernel has zero Frobenius norm")]
    ZeroNormKernel,

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e} after jitter {jitter:e})")]
    NotPositiveDefinite { min_eigenvalue: f64, jitter: f64 },

    #[error("Cholesky factorization failed after jitter escalation up to {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("matrix asymmetry {asymmetry:e} exceeds tolerance {tolerance:e}")]
    Asymmetric { asymmetry: f64, tolerance: f64 },

    #[error("singular Newton matrix at iteration {iteration}")]
    SingularNewton { iteration: usize },

    /// The damped Newton iteration stopped without meeting the residual
    /// tolerance. The last iterate is kept for inspection.
    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonStagnation {
        iterations: usize,
        residual: f64,
        last: DVector<f64>,
    },

    #[error("integrator step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("integrator exceeded {max_steps} steps at t = {t}")]
    MaxSteps { max_steps: usize, t: f64 },

    #[error("no sample accepted after {proposals} proposals")]
    NoAcceptedSamples { proposals: usize },

    #[error("prediction formulas disagree by {difference:e} (tolerance {tolerance:e})")]
    FormulaDisagreement { difference: f64, tolerance: f64 },

    #[error("kernel integration identity violated by {violation:e} at t = {t}")]
    IdentityViolation { violation: f64, t: f64 },

    #[error("dense Jacobian would hold {entries} entries (limit {limit})")]
    TooLarge { entries: usize, limit: usize },

    #[error("malformed IDX file: {0}")]
    Idx(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
