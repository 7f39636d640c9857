use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmrError {
    #[error("iteration did not converge after {iterations} steps")]
    NonConvergence { iterations: usize },
    #[error("matrix is singular on the requested operation (smallest eigenvalue {lambda_min:e})")]
    SingularInput { lambda_min: f64 },
    #[error("X does not vanish on ker(B): residual {residual:e}")]
    KernelMismatch { residual: f64 },
    #[error("all eigenvalues are below the kernel threshold")]
    ZeroMatrix,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("inconsistent right-hand side: kernel component {component:e} exceeds {tol:e}")]
    Inconsistent { component: f64, tol: f64 },
    #[error("negative weight {value:e} at index {index}")]
    Indefinite { index: usize, value: f64 },
    #[error("combination is singular (smallest eigenvalue {lambda_min:e})")]
    Singular { lambda_min: f64 },
    #[error("iteration stagnated at {iterations} iterations (relative residual {residual:e})")]
    Stagnation { iterations: usize, residual: f64 },
    #[error("polynomial degree {degree} exceeds the cap {cap}")]
    DegreeOverflow { degree: usize, cap: usize },
    #[error("matrices do not commute: commutator {commutator:e} exceeds {tol:e}")]
    NotCommuting { commutator: f64, tol: f64 },
    #[error("barrier violated: {0}")]
    BarrierViolation(String),
    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("step too large: lambda_max(Delta) = {lambda_max:e} exceeds {bound:e}")]
    DeltaTooLarge { lambda_max: f64, bound: f64 },
    #[error("whitening operator is not positive definite")]
    SingularWhitening,
    #[error("sketch has {rows} rows, at least {required} needed")]
    SketchDeficient { rows: usize, required: usize },
    #[error("oracle condition two failed with slack {slack:e}")]
    ConditionTwoFailed { slack: f64 },
    #[error("oracle failed: {0}")]
    OracleFailure(String),
    #[error("iteration cap {cap} exceeded")]
    IterCapExceeded { cap: usize },
    #[error("B is singular or indefinite")]
    SingularB,
    #[error("preconditioner broken at stage {stage}: lower slack {lower_slack:e}, upper slack {upper_slack:e}")]
    PreconditionerBroken { stage: usize, lower_slack: f64, upper_slack: f64 },
    #[error("recovery failed: {0}")]
    RecoveryFailed(String),
    #[error("input is not the inverse of an M-matrix: {0}")]
    NotInverseM(String),
    #[error("right-hand side inconsistent on component {component}")]
    ComponentInconsistent { component: usize },
    #[error("validation failed: {0}")]
    ValidationFailed(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("missing oracle channel: {0}")]
    MissingChannel(&'static str),
}

impl SmrError {
    /// Process exit code: 1 for I/O and validation errors, 2 for
    /// inconsistent input and failed certificates or solves.
    pub fn exit_code(&self) -> i32 {
        match self {
            SmrError::Io(_)
            | SmrError::Parse(_)
            | SmrError::ParamOutOfRange(_)
            | SmrError::ValidationFailed(_)
            | SmrError::DimensionMismatch { .. }
            | SmrError::Indefinite { .. }
            | SmrError::NotInverseM(_)
            | SmrError::MissingChannel(_) => 1,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for SmrError {
    fn from(e: std::io::Error) -> Self {
        SmrError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SmrError>;
