//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! structured so callers can match on the failure kind instead of parsing
//! message strings.

use thiserror::Error;

/// Errors raised by dataset I/O, estimation, and export routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid panel schema: {message}")]
    Schema { message: String },

    #[error("row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("stage {stage} out of range for horizon T={horizon}")]
    StageOutOfRange { stage: usize, horizon: usize },

    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("dataset is already demeaned")]
    AlreadyDemeaned,

    #[error("dataset has no trajectories")]
    EmptyDataset,

    #[error("invalid welfare weights: {message}")]
    InvalidGamma { message: String },

    #[error("invalid budget specification: {message}")]
    InvalidBudget { message: String },

    #[error("invalid policy class: {message}")]
    InvalidPolicySpec { message: String },

    #[error("invalid propensity model: {message}")]
    InvalidPropensity { message: String },

    #[error(
        "stage {stage} has a single treatment arm (all observations have d={arm}); \
         the propensity for the unobserved arm is not identified"
    )]
    SingleArm { stage: usize, arm: u8 },

    #[error(
        "logistic fit for stage {stage} diverged (coefficient norm {norm:.3e}); \
         the treatment groups appear perfectly separated. Use a Known propensity \
         model or a coarser feature selector"
    )]
    PerfectSeparation { stage: usize, norm: f64 },

    #[error("logistic fit for stage {stage} did not converge within {iterations} iterations")]
    LogisticNoConverge { stage: usize, iterations: usize },

    #[error("rank-deficient regression design in {what}; drop collinear features")]
    RankDeficient { what: String },

    #[error("no candidate rule at stage {stage} satisfies the constraints")]
    EmptyFeasibleSet { stage: usize },

    #[error("no candidate treatment regime satisfies the budget constraints")]
    NoFeasibleDtr,

    #[error(
        "candidate enumeration needs {required} rules, above the configured budget \
         {budget}; restrict the policy class or export the problem as a MILP"
    )]
    EnumerationBudget { required: u128, budget: u64 },

    #[error("{op} supports horizon T={required} only, but the dataset has T={got}")]
    UnsupportedHorizon {
        op: &'static str,
        required: usize,
        got: usize,
    },

    #[error("{op} requires welfare weights {required}, got {got}")]
    UnsupportedGamma {
        op: &'static str,
        required: String,
        got: String,
    },

    #[error("malformed rule file at line {line}: {message}")]
    RuleFile { line: usize, message: String },

    #[error("{0}")]
    Invalid(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
