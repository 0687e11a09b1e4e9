use thiserror::Error;

/// Errors raised by the numerical core: solvers, fits, criteria and simulation.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ElcicError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dual Hessian is singular even after jitter; estimating functions are collinear")]
    SingularHessian,

    #[error("zero lies outside the convex hull of the estimating functions; weights are undefined")]
    HullViolation,

    #[error("linear predictor {eta} overflows the log link")]
    LinkOverflow { eta: f64 },

    #[error("working covariance is not invertible")]
    SingularWorkingCov,

    #[error("estimated observing probability {pi} is below the 1e-3 floor")]
    DegenerateWeight { pi: f64 },

    #[error("masked design does not have full column rank")]
    RankDeficient,

    #[error("iteration did not converge after {iterations} iterations")]
    Diverged { iterations: usize },

    #[error("working correlation with alpha = {alpha} is not positive definite")]
    NonPdWorkingCorr { alpha: f64 },

    #[error("logistic missingness model diverged (separation)")]
    Separation,

    #[error("unsupported family for this criterion: {0}")]
    UnsupportedFamily(String),

    #[error("Jacobian block of the fitted equations is singular")]
    SingularBlock,

    #[error("copula calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("unit {unit}: {source}")]
    Row {
        unit: usize,
        #[source]
        source: Box<ElcicError>,
    },

    #[error("every tuning value failed: {}", .0.join("; "))]
    AllGridFailed(Vec<String>),

    #[error("{failed} of {reps} replicates failed (more than 5%)")]
    TooManyFailures { failed: usize, reps: usize },

    #[error("candidate list is empty")]
    EmptyCandidates,
}

impl ElcicError {
    pub(crate) fn at_unit(self, unit: usize) -> Self {
        ElcicError::Row {
            unit,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, ElcicError>;
