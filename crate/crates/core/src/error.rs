use crate::km::ScheduleViolation;
use crate::pd::ConditionReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("layout mismatch: expected blocks {expected:?}, found {found:?}")]
    LayoutMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("rejected schedule: {0}")]
    Schedule(ScheduleViolation),

    #[error("rejected configuration: {0}")]
    Config(String),

    #[error("rejected sampling plan: {0}")]
    Plan(String),

    #[error("convergence condition failed: {0}")]
    Condition(Box<ConditionReport>),

    #[error("divergence at iteration {iteration}: non-finite value in {what}")]
    Divergence { iteration: usize, what: String },

    /// A dual block was activated while a primal block it reads was not.
    #[error(
        "coupling violated at iteration {iteration}: dual block {dual} active but primal block {primal} inactive"
    )]
    CouplingViolation {
        iteration: usize,
        dual: usize,
        primal: usize,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
