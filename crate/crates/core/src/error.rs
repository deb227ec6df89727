use thiserror::Error;

use crate::balancer::BalanceSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    /// Panel is not balanced (a unit is missing a period, or a cell is duplicated).
    #[error("unbalanced panel: {0}")]
    Balance(String),

    #[error("inconsistent input: {0}")]
    Consistency(String),

    /// Dataset or spec violates a structural invariant.
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of range: {0}")]
    Range(String),

    /// Newton iterations exhausted; the best iterate is attached.
    #[error("solver did not converge after {iterations} iterations (gradient sup-norm {residual:.3e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        best: Option<Box<BalanceSolution>>,
    },

    /// A linear index exceeded the exponent guard; usually no overlap between groups.
    #[error("exponent overflow (|index| = {0:.1}); treated and control features may not overlap")]
    Overflow(f64),

    #[error("rank deficient design: {0}")]
    Rank(String),

    #[error("empty cohort: {0}")]
    EmptyCohort(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("study failed: {0}")]
    Study(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, printed by the CLI as `error:<tag>`.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
            Error::Balance(_) => "balance",
            Error::Consistency(_) => "consistency",
            Error::Validation(_) => "validation",
            Error::Shape(_) => "shape",
            Error::Range(_) => "range",
            Error::Convergence { .. } => "convergence",
            Error::Overflow(_) => "overflow",
            Error::Rank(_) => "rank",
            Error::EmptyCohort(_) => "empty_cohort",
            Error::DegenerateDesign(_) => "degenerate_design",
            Error::Study(_) => "study",
            Error::Json(_) => "json",
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse(format!("{other:?}")),
        }
    }
}
