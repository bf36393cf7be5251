//! Policy learning for dynamic treatment regimes by empirical welfare
//! maximization.
//!
//! This crate estimates multi-stage treatment assignment rules from panel
//! data. Two estimators share a common machinery: backward induction (fit the
//! last stage first, then roll back) and simultaneous maximization over all
//! stages at once, optionally under budget/capacity constraints. Both select
//! linear eligibility-score rules by maximizing an inverse-propensity-weighted
//! empirical welfare criterion over a policy class. A regression-based
//! Q-learning baseline, a mixed-integer linear program exporter for external
//! solvers, and a Monte Carlo simulation lab round out the toolkit.
//!
//! Modules:
//! - [`data`]: panel datasets, canonical histories, CSV I/O, demeaning.
//! - [`policy`]: stage rules, regimes, policy classes, text serialization.
//! - [`propensity`]: known and logistic-estimated assignment models.
//! - [`welfare`]: empirical welfare, backward objectives, budget costs.
//! - [`search`]: candidate enumeration and exact weighted-rule argmax.
//! - [`estimators`]: the backward, simultaneous, budgeted, and Q-learning
//!   fitting entry points.
//! - [`milp`]: mixed-integer linear program export in LP text format.
//! - [`simlab`]: data-generating processes and Monte Carlo evaluation.

pub mod data;
pub mod error;
pub mod estimators;
pub mod milp;
pub mod policy;
pub mod propensity;
pub mod search;
pub mod simlab;
mod textio;
pub mod welfare;

pub use data::{
    demean_outcomes, history, load_panel, write_panel, HistoryVector, PanelDataset, Trajectory,
};
pub use error::{Error, Result};
pub use estimators::{
    default_alpha, fit_backward, fit_qlearning, fit_simultaneous, fit_simultaneous_budget,
    AscentConfig, EstimationConfig, FitMetrics, FitResult, SearchStrategy,
};
pub use milp::{
    build_backward_milp, build_simultaneous_milp, parse_lp, write_lp, LinTerm, MilpModel, ParsedLp,
    ParsedRow, Row, RowSense, Variable,
};
pub use policy::{
    apply_rule, check_intertemporal, load_dtr, match_indicator, write_dtr, Dtr, FeatureRef,
    IntertemporalKind, PolicyClassSpec, RuleKind, SignConstraint, StageClassSpec, StageRule,
};
pub use propensity::{
    fit_logistic_model, fit_logistic_stage, load_propensity, propensity_at, write_propensity,
    PropensityModel, StageModel,
};
pub use search::{argmax_weighted_rule, enumerate_candidates, CandidateSet};
pub use simlab::{
    benchmark_class, format_table, generate_dgp, oracle_welfare, replicate_table1, run_monte_carlo,
    write_replication_csv, DgpId, DgpSpec, McCell, McEstimator, McReport,
};
pub use welfare::{
    backward_objective, budget_feasible, budget_lhs, empirical_treated_share, empirical_welfare,
    welfare_report, BudgetRow, BudgetSpec, ShareEstimate, WelfareReport, WelfareWeights,
};
