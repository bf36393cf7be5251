//! Regime estimators.
//!
//! Four fitting procedures share one configuration surface:
//!
//! - [`fit_backward`]: stagewise estimation from the last stage to the first.
//!   Each stage maximizes the IPW objective for welfare from that stage on,
//!   with the already-fitted later rules deciding the remaining stages and
//!   intertemporal restrictions checked against observed prior treatments.
//! - [`fit_simultaneous`]: joint maximization of full-horizon empirical
//!   welfare over the class product. Small candidate products are scored
//!   exhaustively; unconstrained two-stage problems whose smaller stage
//!   enumerates cheaply are solved exactly by conditioning the other stage on
//!   each candidate; everything else runs multi-start cyclic coordinate
//!   ascent where every stage step is an exact weighted-classification
//!   argmax, so the objective never decreases within a sweep.
//! - [`fit_simultaneous_budget`]: the joint estimator with treated-share
//!   budget rows `Σ_t K_tb·share_t ≤ C_b + α_n` enforced on every candidate.
//! - [`fit_qlearning`]: the two-stage regression baseline, fitting linear
//!   stage-outcome models backward and deriving the implied rules.
//!
//! Every stage subproblem reduces to weighted classification: with stage
//! weights `w_i`, the best rule maximizes `Σ_i w_i·g(H_it)`, solved exactly
//! by the engines in [`crate::search`].

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{history, PanelDataset};
use crate::error::{Error, Result};
use crate::policy::{
    feature_row, Dtr, FeatureRef, IntertemporalKind, PolicyClassSpec, StageClassSpec, StageRule,
};
use crate::propensity::{propensity_at, PropensityModel};
use crate::search::solvers::{ScoredRule, StageConstraint, StageSolver};
use crate::welfare::{
    budget_lhs, empirical_treated_share, empirical_welfare, BudgetSpec, WelfareWeights,
};

/// Multi-start coordinate ascent controls.
#[derive(Debug, Clone)]
pub struct AscentConfig {
    /// Number of restarts, including the treat-nobody start.
    pub restarts: usize,
    /// Maximum full sweeps over the stages per restart.
    pub max_sweeps: usize,
    /// Stop a restart once a full sweep improves welfare by at most this.
    pub tolerance: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        AscentConfig {
            restarts: 20,
            max_sweeps: 50,
            tolerance: 1e-12,
        }
    }
}

/// Shared estimator configuration.
#[derive(Debug, Clone)]
pub struct EstimationConfig {
    pub weights: WelfareWeights,
    pub class_spec: PolicyClassSpec,
    pub budget: Option<BudgetSpec>,
    /// Confidence level for the default budget slack `α_n`.
    pub delta: f64,
    pub ascent: AscentConfig,
    /// Exhaustive product search applies when the candidate product has at
    /// most this many combinations.
    pub exhaustive_cap: u64,
    /// Exact two-stage search applies when the smaller stage's candidate
    /// count times the sample size stays within this bound (0 disables it).
    pub bilevel_cells_cap: u64,
    /// Per-stage cap on enumerated candidates before estimation refuses and
    /// suggests the MILP export.
    pub enumeration_budget: u64,
    pub seed: u64,
}

impl EstimationConfig {
    pub fn new(weights: WelfareWeights, class_spec: PolicyClassSpec) -> Self {
        EstimationConfig {
            weights,
            class_spec,
            budget: None,
            delta: 0.05,
            ascent: AscentConfig::default(),
            exhaustive_cap: 1_000_000,
            bilevel_cells_cap: 50_000_000,
            enumeration_budget: 5_000_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ascent.restarts == 0 || self.ascent.max_sweeps == 0 {
            return Err(Error::Invalid(
                "coordinate ascent needs at least one restart and one sweep".into(),
            ));
        }
        if !(self.ascent.tolerance >= 0.0) {
            return Err(Error::Invalid(
                "coordinate ascent tolerance must be non-negative".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Invalid(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if self.exhaustive_cap == 0 || self.enumeration_budget == 0 {
            return Err(Error::Invalid("search caps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Default budget slack `α_n = sqrt(log(6B/δ) / (2n))` for `B` budget rows,
/// confidence level `δ`, and sample size `n`.
///
/// Panics if `rows == 0`, `n == 0`, or `delta` is outside `(0,1)`.
pub fn default_alpha(rows: usize, delta: f64, n: usize) -> f64 {
    assert!(rows >= 1, "alpha_n needs at least one budget row");
    assert!(n >= 1, "alpha_n needs a positive sample size");
    assert!(
        delta > 0.0 && delta < 1.0,
        "alpha_n confidence level must lie in (0,1)"
    );
    ((6.0 * rows as f64 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// Which search path produced a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchStrategy {
    /// Full candidate-product scoring.
    Exhaustive,
    /// Exact two-stage search: one stage enumerated, the other solved
    /// conditionally per candidate.
    Bilevel,
    /// Multi-start cyclic coordinate ascent.
    CoordinateAscent,
    /// Stagewise backward fitting.
    Stagewise,
    /// Regression-based rule derivation.
    Regression,
}

/// A fitted regime with its in-sample diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub dtr: Dtr,
    /// IPW welfare of `dtr` on the training data.
    pub empirical_welfare: f64,
    /// Conditional treated share per stage.
    pub stage_shares: Vec<f64>,
    /// Realized `Σ_t K_tb·share_t` per budget row (empty without a budget).
    pub budget_lhs: Vec<f64>,
    pub warnings: Vec<String>,
    /// Coordinate-ascent sweeps used by the winning restart (0 for the other
    /// strategies).
    pub sweeps: usize,
    pub strategy: SearchStrategy,
}

/// Serializable diagnostics block of a [`FitResult`].
#[derive(Debug, Clone, Serialize)]
pub struct FitMetrics {
    pub empirical_welfare: f64,
    pub stage_shares: Vec<f64>,
    pub budget_lhs: Vec<f64>,
    pub warnings: Vec<String>,
    pub sweeps: usize,
    pub strategy: SearchStrategy,
}

impl FitResult {
    pub fn metrics(&self) -> FitMetrics {
        FitMetrics {
            empirical_welfare: self.empirical_welfare,
            stage_shares: self.stage_shares.clone(),
            budget_lhs: self.budget_lhs.clone(),
            warnings: self.warnings.clone(),
            sweeps: self.sweeps,
            strategy: self.strategy,
        }
    }

    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics()).expect("metrics serialize")
    }
}

// ── Shared fitting context ───────────────────────────────────────────────────

/// Precomputed per-observation quantities and per-stage argmax engines.
struct FitContext<'a> {
    ds: &'a PanelDataset,
    pm: &'a PropensityModel,
    cfg: &'a EstimationConfig,
    /// Observed treatments, `n × T`.
    d_obs: Vec<Vec<u8>>,
    /// Propensity of the observed treatment, `n × T`.
    e_obs: Vec<Vec<f64>>,
    /// `γ_t·Y_it`, `n × T`.
    gy: Vec<Vec<f64>>,
    /// Full-path IPW outcome terms `γ_t·Y_it / Π_{s≤t} e_s`, `n × T`.
    u: Vec<Vec<f64>>,
    solvers: Vec<StageSolver>,
}

impl<'a> FitContext<'a> {
    fn build(
        ds: &'a PanelDataset,
        pm: &'a PropensityModel,
        cfg: &'a EstimationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        cfg.class_spec.validate(ds)?;
        if ds.n() == 0 {
            return Err(Error::EmptyDataset);
        }
        let horizon = ds.horizon;
        if cfg.weights.horizon() != horizon {
            return Err(Error::DimensionMismatch {
                what: "welfare weights".into(),
                expected: horizon,
                got: cfg.weights.horizon(),
            });
        }
        if pm.horizon() != horizon {
            return Err(Error::DimensionMismatch {
                what: "propensity stages".into(),
                expected: horizon,
                got: pm.horizon(),
            });
        }
        if let Some(budget) = &cfg.budget {
            for (b, row) in budget.rows.iter().enumerate() {
                if row.k.len() != horizon {
                    return Err(Error::DimensionMismatch {
                        what: format!("budget row {b} weights"),
                        expected: horizon,
                        got: row.k.len(),
                    });
                }
            }
        }

        let n = ds.n();
        let mut d_obs = Vec::with_capacity(n);
        let mut e_obs = Vec::with_capacity(n);
        let mut gy = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        for traj in &ds.trajectories {
            let mut e_row = Vec::with_capacity(horizon);
            let mut gy_row = Vec::with_capacity(horizon);
            let mut u_row = Vec::with_capacity(horizon);
            let mut inv_e = 1.0;
            for t in 1..=horizon {
                let d = traj.treatments[t - 1];
                let e = propensity_at(pm, t, d, &history(traj, t))?;
                inv_e /= e;
                e_row.push(e);
                let g = cfg.weights.gamma[t - 1] * traj.outcomes[t - 1];
                gy_row.push(g);
                u_row.push(g * inv_e);
            }
            d_obs.push(traj.treatments.clone());
            e_obs.push(e_row);
            gy.push(gy_row);
            u.push(u_row);
        }

        let mut solvers = Vec::with_capacity(horizon);
        for (t0, class) in cfg.class_spec.stages.iter().enumerate() {
            let t = t0 + 1;
            let matrix: Vec<Vec<f64>> = match class {
                StageClassSpec::Constants => vec![Vec::new(); n],
                StageClassSpec::Linear { features, .. } => ds
                    .trajectories
                    .iter()
                    .map(|traj| feature_row(features, &history(traj, t).values))
                    .collect(),
            };
            solvers.push(StageSolver::build(
                t,
                class,
                matrix,
                cfg.enumeration_budget,
            )?);
        }

        Ok(FitContext {
            ds,
            pm,
            cfg,
            d_obs,
            e_obs,
            gy,
            u,
            solvers,
        })
    }

    fn n(&self) -> usize {
        self.ds.n()
    }

    fn horizon(&self) -> usize {
        self.ds.horizon
    }

    /// Stage weights for the backward step at `t`: remaining welfare from `t`
    /// with the already-fitted rules (given by their assignment vectors)
    /// deciding stages `t+1..T`, signed toward the observed treatment.
    fn backward_weights(&self, t: usize, assigns: &[Vec<u8>]) -> Vec<f64> {
        let horizon = self.horizon();
        (0..self.n())
            .map(|i| {
                let mut inv_e = 1.0;
                let mut m = 0.0;
                for s in t..=horizon {
                    inv_e /= self.e_obs[i][s - 1];
                    if s > t && assigns[s - 1][i] != self.d_obs[i][s - 1] {
                        break;
                    }
                    m += self.gy[i][s - 1] * inv_e;
                }
                m * (2.0 * f64::from(self.d_obs[i][t - 1]) - 1.0)
            })
            .collect()
    }

    /// Stage weights for the coordinate step at `t`: full-path welfare terms
    /// gated by the other stages' current assignments.
    fn coordinate_weights(&self, t: usize, assigns: &[Vec<u8>]) -> Vec<f64> {
        let horizon = self.horizon();
        (0..self.n())
            .map(|i| {
                for s in 1..t {
                    if assigns[s - 1][i] != self.d_obs[i][s - 1] {
                        return 0.0;
                    }
                }
                let mut sum = 0.0;
                for tp in t..=horizon {
                    if tp > t && assigns[tp - 1][i] != self.d_obs[i][tp - 1] {
                        break;
                    }
                    sum += self.u[i][tp - 1];
                }
                sum * (2.0 * f64::from(self.d_obs[i][t - 1]) - 1.0)
            })
            .collect()
    }

    /// Full-horizon empirical welfare of per-stage assignment vectors.
    fn welfare_of<A: AsRef<[u8]>>(&self, assigns: &[A]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n() {
            for t in 1..=self.horizon() {
                if assigns[t - 1].as_ref()[i] != self.d_obs[i][t - 1] {
                    break;
                }
                total += self.u[i][t - 1];
            }
        }
        total / self.n() as f64
    }

    /// Whether per-stage assignments jointly satisfy the intertemporal kind
    /// for every observation.
    fn intertemporal_ok(&self, assigns: &[&[u8]]) -> bool {
        let kind = self.cfg.class_spec.intertemporal;
        if kind == IntertemporalKind::None {
            return true;
        }
        (0..self.n()).all(|i| {
            let mut prior_sum = 0u32;
            let mut prev = None::<u8>;
            for a in assigns {
                let v = a[i];
                let ok = match kind {
                    IntertemporalKind::None => true,
                    IntertemporalKind::OneShot => prior_sum + u32::from(v) <= 1,
                    IntertemporalKind::StartTime => prev.map_or(true, |p| v >= p),
                    IntertemporalKind::StopTime => prev.map_or(true, |p| v <= p),
                };
                if !ok {
                    return false;
                }
                prior_sum += u32::from(v);
                prev = Some(v);
            }
            true
        })
    }

    /// Forced stage-`t` assignments implied by observed prior treatments
    /// (backward fitting).
    fn forced_from_observed(&self, t: usize) -> (Option<Vec<bool>>, Option<Vec<bool>>) {
        match self.cfg.class_spec.intertemporal {
            IntertemporalKind::None => (None, None),
            IntertemporalKind::OneShot => {
                let mz = (0..self.n())
                    .map(|i| self.d_obs[i][..t - 1].iter().any(|&d| d == 1))
                    .collect();
                (None, Some(mz))
            }
            IntertemporalKind::StartTime => {
                let mo = (0..self.n())
                    .map(|i| self.d_obs[i][..t - 1].iter().any(|&d| d == 1))
                    .collect();
                (Some(mo), None)
            }
            IntertemporalKind::StopTime => {
                let mz = (0..self.n())
                    .map(|i| self.d_obs[i][..t - 1].iter().any(|&d| d == 0))
                    .collect();
                (None, Some(mz))
            }
        }
    }

    /// Forced stage-`t` assignments implied by the other stages' current
    /// candidate assignments (simultaneous fitting). `through` limits which
    /// other stages constrain `t` (prior stages only during a repair sweep).
    fn forced_from_candidates(
        &self,
        t: usize,
        assigns: &[Vec<u8>],
        through: usize,
    ) -> (Option<Vec<bool>>, Option<Vec<bool>>) {
        let kind = self.cfg.class_spec.intertemporal;
        if kind == IntertemporalKind::None {
            return (None, None);
        }
        let mut must_one = vec![false; self.n()];
        let mut must_zero = vec![false; self.n()];
        let mut any_one = false;
        let mut any_zero = false;
        for s in 1..=through {
            if s == t {
                continue;
            }
            for i in 0..self.n() {
                let v = assigns[s - 1][i];
                match kind {
                    IntertemporalKind::None => {}
                    IntertemporalKind::OneShot => {
                        if v == 1 {
                            must_zero[i] = true;
                            any_zero = true;
                        }
                    }
                    IntertemporalKind::StartTime => {
                        if s < t && v == 1 {
                            must_one[i] = true;
                            any_one = true;
                        }
                        if s > t && v == 0 {
                            must_zero[i] = true;
                            any_zero = true;
                        }
                    }
                    IntertemporalKind::StopTime => {
                        if s < t && v == 0 {
                            must_zero[i] = true;
                            any_zero = true;
                        }
                        if s > t && v == 1 {
                            must_one[i] = true;
                            any_one = true;
                        }
                    }
                }
            }
        }
        (any_one.then_some(must_one), any_zero.then_some(must_zero))
    }

    /// Budget left-hand sides for assignment vectors, mirroring
    /// [`crate::welfare::budget_lhs`] bit for bit. `through` limits the share
    /// terms to stages `1..=through`.
    fn budget_rows_of(
        &self,
        spec: &BudgetSpec,
        assigns: &[&[u8]],
        through: usize,
    ) -> (Vec<f64>, bool) {
        let mut shares = Vec::with_capacity(through);
        let mut any_empty = false;
        for t in 1..=through {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..self.n() {
                let on_path = (1..t).all(|s| assigns[s - 1][i] == self.d_obs[i][s - 1]);
                if on_path {
                    den += 1.0;
                    num += f64::from(assigns[t - 1][i]);
                }
            }
            if den == 0.0 {
                shares.push(0.0);
                any_empty = true;
            } else {
                shares.push(num / den);
            }
        }
        let lhs = spec
            .rows
            .iter()
            .map(|row| {
                (1..=through)
                    .map(|t| row.k[t - 1] * shares[t - 1])
                    .sum::<f64>()
            })
            .collect();
        (lhs, any_empty)
    }

    /// Whether assignments satisfy every budget row through the given stage.
    fn budget_ok(&self, spec: &BudgetSpec, assigns: &[&[u8]], through: usize) -> bool {
        let (lhs, any_empty) = self.budget_rows_of(spec, assigns, through);
        if any_empty && spec.strict_empty_paths {
            return false;
        }
        lhs.iter()
            .zip(&spec.rows)
            .all(|(v, row)| *v <= row.c + spec.alpha_n)
    }

    /// Packages fitted rules into a [`FitResult`], re-deriving all reported
    /// diagnostics from the assembled regime.
    fn finalize(
        &self,
        rules: Vec<StageRule>,
        strategy: SearchStrategy,
        sweeps: usize,
        mut warnings: Vec<String>,
    ) -> Result<FitResult> {
        let mut dtr = Dtr::new(rules);
        if self.ds.demeaned {
            dtr.outcome_offsets = self.ds.outcome_means.clone();
        }
        let welfare = empirical_welfare(self.ds, &dtr, self.pm, &self.cfg.weights)?;
        let mut stage_shares = Vec::with_capacity(self.horizon());
        for t in 1..=self.horizon() {
            let share = empirical_treated_share(self.ds, &dtr, t)?;
            if share.empty_path {
                warnings.push(format!(
                    "stage {t} treated share conditions on an empty path; reported as 0"
                ));
            }
            stage_shares.push(share.share);
        }
        let mut lhs = Vec::new();
        if let Some(spec) = &self.cfg.budget {
            for b in 0..spec.rows.len() {
                lhs.push(budget_lhs(self.ds, &dtr, spec, b)?.cost);
            }
        }
        Ok(FitResult {
            dtr,
            empirical_welfare: welfare,
            stage_shares,
            budget_lhs: lhs,
            warnings,
            sweeps,
            strategy,
        })
    }
}

// ── Backward fitting ─────────────────────────────────────────────────────────

/// Fits one rule per stage from the last stage backward.
pub fn fit_backward(
    ds: &PanelDataset,
    pm: &PropensityModel,
    cfg: &EstimationConfig,
) -> Result<FitResult> {
    if cfg.budget.is_some() {
        return Err(Error::InvalidBudget {
            message: "backward fitting does not support budget rows; use the simultaneous method"
                .into(),
        });
    }
    let ctx = FitContext::build(ds, pm, cfg)?;
    let horizon = ctx.horizon();
    let mut rules: Vec<Option<StageRule>> = vec![None; horizon];
    let mut assigns: Vec<Vec<u8>> = vec![Vec::new(); horizon];
    for t in (1..=horizon).rev() {
        let weights = ctx.backward_weights(t, &assigns);
        let (must_one, must_zero) = ctx.forced_from_observed(t);
        let mut constraint = StageConstraint {
            must_one: must_one.as_deref(),
            must_zero: must_zero.as_deref(),
            predicate: None,
        };
        let best = ctx.solvers[t - 1].argmax(&weights, &mut constraint)?;
        rules[t - 1] = Some(best.rule);
        assigns[t - 1] = best.assign;
    }
    ctx.finalize(
        rules
            .into_iter()
            .map(|r| r.expect("all stages fitted"))
            .collect(),
        SearchStrategy::Stagewise,
        0,
        Vec::new(),
    )
}

// ── Simultaneous fitting ─────────────────────────────────────────────────────

/// Jointly maximizes empirical welfare over the class product.
pub fn fit_simultaneous(
    ds: &PanelDataset,
    pm: &PropensityModel,
    cfg: &EstimationConfig,
) -> Result<FitResult> {
    if cfg.budget.is_some() {
        return fit_simultaneous_budget(ds, pm, cfg);
    }
    let ctx = FitContext::build(ds, pm, cfg)?;
    fit_joint(&ctx, None)
}

/// Jointly maximizes empirical welfare subject to the budget rows.
pub fn fit_simultaneous_budget(
    ds: &PanelDataset,
    pm: &PropensityModel,
    cfg: &EstimationConfig,
) -> Result<FitResult> {
    let budget = cfg.budget.as_ref().ok_or_else(|| Error::InvalidBudget {
        message: "fit_simultaneous_budget needs a budget specification".into(),
    })?;
    let ctx = FitContext::build(ds, pm, cfg)?;
    fit_joint(&ctx, Some(budget))
}

fn fit_joint(ctx: &FitContext, budget: Option<&BudgetSpec>) -> Result<FitResult> {
    let product: u128 = ctx
        .solvers
        .iter()
        .map(StageSolver::candidate_count)
        .fold(1u128, |acc, c| acc.saturating_mul(c));
    if product <= u128::from(ctx.cfg.exhaustive_cap) {
        return fit_exhaustive(ctx, budget);
    }
    if budget.is_none()
        && ctx.horizon() == 2
        && ctx.cfg.class_spec.intertemporal == IntertemporalKind::None
        && ctx.cfg.bilevel_cells_cap > 0
    {
        let min_count = ctx
            .solvers
            .iter()
            .map(StageSolver::candidate_count)
            .min()
            .unwrap_or(0);
        if min_count.saturating_mul(ctx.n() as u128) <= u128::from(ctx.cfg.bilevel_cells_cap) {
            return fit_bilevel(ctx);
        }
    }
    fit_ascent(ctx, budget)
}

/// Exact unconstrained two-stage search. Enumerates every candidate of the
/// stage with the smaller candidate count and solves the other stage's
/// conditional argmax exactly for each, keeping the best full-horizon
/// welfare. The result matches exhaustive product scoring without
/// materializing the product.
fn fit_bilevel(ctx: &FitContext) -> Result<FitResult> {
    let (outer, inner) = if ctx.solvers[0].candidate_count() <= ctx.solvers[1].candidate_count() {
        (1usize, 2usize)
    } else {
        (2usize, 1usize)
    };
    let n = ctx.n();
    let mut assigns: Vec<Vec<u8>> = vec![vec![0u8; n], vec![0u8; n]];
    let mut best: Option<(f64, StageRule, StageRule)> = None;
    for (rule_out, assign_out) in ctx.solvers[outer - 1].enumerate_all() {
        assigns[outer - 1].clone_from(&assign_out);
        let weights = ctx.coordinate_weights(inner, &assigns);
        let mut constraint = StageConstraint {
            must_one: None,
            must_zero: None,
            predicate: None,
        };
        let best_in = ctx.solvers[inner - 1].argmax(&weights, &mut constraint)?;
        let value = {
            let views: [&[u8]; 2] = if outer == 1 {
                [&assign_out, &best_in.assign]
            } else {
                [&best_in.assign, &assign_out]
            };
            ctx.welfare_of(&views)
        };
        if best.as_ref().map_or(true, |(bv, _, _)| value > *bv) {
            let (r1, r2) = if outer == 1 {
                (rule_out, best_in.rule)
            } else {
                (best_in.rule, rule_out)
            };
            best = Some((value, r1, r2));
        }
    }
    let (_, r1, r2) = best.ok_or(Error::NoFeasibleDtr)?;
    ctx.finalize(vec![r1, r2], SearchStrategy::Bilevel, 0, Vec::new())
}

/// Strategy A: score every candidate combination.
fn fit_exhaustive(ctx: &FitContext, budget: Option<&BudgetSpec>) -> Result<FitResult> {
    let horizon = ctx.horizon();
    let lists: Vec<Vec<(StageRule, Vec<u8>)>> =
        ctx.solvers.iter().map(StageSolver::enumerate_all).collect();
    let sizes: Vec<usize> = lists.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().product();

    let eval = |flat: usize| -> Option<f64> {
        let mut idx = flat;
        let mut combo = Vec::with_capacity(horizon);
        for size in &sizes {
            combo.push(idx % size);
            idx /= size;
        }
        let assigns: Vec<&[u8]> = combo
            .iter()
            .enumerate()
            .map(|(t0, &c)| lists[t0][c].1.as_slice())
            .collect();
        if !ctx.intertemporal_ok(&assigns) {
            return None;
        }
        if let Some(spec) = budget {
            if !ctx.budget_ok(spec, &assigns, horizon) {
                return None;
            }
        }
        Some(ctx.welfare_of(&assigns))
    };

    let best = (0..total)
        .into_par_iter()
        .filter_map(|flat| eval(flat).map(|w| (flat, w)))
        .reduce_with(|a, b| {
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        });
    let (flat, _) = best.ok_or(Error::NoFeasibleDtr)?;
    let mut idx = flat;
    let mut rules = Vec::with_capacity(horizon);
    for (t0, size) in sizes.iter().enumerate() {
        rules.push(lists[t0][idx % size].0.clone());
        idx /= size;
    }
    ctx.finalize(rules, SearchStrategy::Exhaustive, 0, Vec::new())
}

/// One coordinate-ascent restart. Returns the fitted rules, their assignment
/// vectors, the final welfare, and the sweeps used; `None` when the restart
/// cannot reach a feasible configuration.
fn run_restart(
    ctx: &FitContext,
    budget: Option<&BudgetSpec>,
    restart: usize,
) -> Option<(Vec<StageRule>, Vec<Vec<u8>>, f64, usize)> {
    let horizon = ctx.horizon();
    let mut rules: Vec<StageRule> = Vec::with_capacity(horizon);
    let mut assigns: Vec<Vec<u8>> = Vec::with_capacity(horizon);
    if restart == 0 {
        for solver in &ctx.solvers {
            match solver.zero_rule() {
                Some((rule, assign)) => {
                    rules.push(rule);
                    assigns.push(assign);
                }
                None => return run_random_restart(ctx, budget, restart, u64::MAX),
            }
        }
    } else {
        return run_random_restart(ctx, budget, restart, restart as u64);
    }
    ascend(ctx, budget, rules, assigns, true)
}

fn run_random_restart(
    ctx: &FitContext,
    budget: Option<&BudgetSpec>,
    _restart: usize,
    stream: u64,
) -> Option<(Vec<StageRule>, Vec<Vec<u8>>, f64, usize)> {
    let mut rng = ChaCha12Rng::seed_from_u64(
        ctx.cfg
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1))),
    );
    let mut rules = Vec::with_capacity(ctx.horizon());
    let mut assigns = Vec::with_capacity(ctx.horizon());
    for solver in &ctx.solvers {
        let ScoredRule { rule, assign, .. } = solver.random_candidate(&mut rng);
        rules.push(rule);
        assigns.push(assign);
    }
    ascend(ctx, budget, rules, assigns, false)
}

/// Cyclic exact coordinate ascent from an initial configuration. The first
/// sweep repairs feasibility by constraining each stage against earlier
/// stages only (and the budget over the stages repaired so far); later sweeps
/// constrain against the full current configuration. The welfare sequence
/// across steps never decreases after the repair sweep.
fn ascend(
    ctx: &FitContext,
    budget: Option<&BudgetSpec>,
    mut rules: Vec<StageRule>,
    mut assigns: Vec<Vec<u8>>,
    start_feasible: bool,
) -> Option<(Vec<StageRule>, Vec<Vec<u8>>, f64, usize)> {
    let horizon = ctx.horizon();
    let n = ctx.n() as f64;
    let mut sweeps = 0;
    let max_sweeps = ctx.cfg.ascent.max_sweeps;
    let needs_repair = !start_feasible;
    for sweep in 0..max_sweeps {
        let repair = needs_repair && sweep == 0;
        let mut improvement = 0.0;
        for t in 1..=horizon {
            let weights = ctx.coordinate_weights(t, &assigns);
            let through = if repair { t } else { horizon };
            let (must_one, must_zero) = ctx.forced_from_candidates(t, &assigns, through);
            let current = crate::search::solvers::index_order_value(&weights, &assigns[t - 1]);
            let step = {
                let mut predicate = budget.map(|spec| {
                    let assigns_ref = &assigns;
                    move |_rule: &StageRule, cand: &[u8]| -> bool {
                        let views: Vec<&[u8]> = (0..horizon)
                            .map(|s0| {
                                if s0 + 1 == t {
                                    cand
                                } else {
                                    assigns_ref[s0].as_slice()
                                }
                            })
                            .collect();
                        ctx.budget_ok(spec, &views, through)
                    }
                });
                let mut constraint = StageConstraint {
                    must_one: must_one.as_deref(),
                    must_zero: must_zero.as_deref(),
                    predicate: predicate
                        .as_mut()
                        .map(|p| p as &mut dyn FnMut(&StageRule, &[u8]) -> bool),
                };
                ctx.solvers[t - 1].argmax(&weights, &mut constraint)
            };
            match step {
                Ok(best) => {
                    if repair || best.value > current {
                        improvement += (best.value - current).max(0.0);
                        rules[t - 1] = best.rule;
                        assigns[t - 1] = best.assign;
                    }
                }
                Err(_) if repair => return None,
                Err(_) => {}
            }
        }
        sweeps = sweep + 1;
        if !repair && improvement / n <= ctx.cfg.ascent.tolerance {
            break;
        }
    }
    let value = ctx.welfare_of(&assigns);
    if let Some(spec) = budget {
        let views: Vec<&[u8]> = assigns.iter().map(Vec::as_slice).collect();
        if !ctx.budget_ok(spec, &views, horizon) {
            return None;
        }
    }
    {
        let views: Vec<&[u8]> = assigns.iter().map(Vec::as_slice).collect();
        if !ctx.intertemporal_ok(&views) {
            return None;
        }
    }
    Some((rules, assigns, value, sweeps))
}

/// Strategy B: multi-start exact cyclic coordinate ascent.
fn fit_ascent(ctx: &FitContext, budget: Option<&BudgetSpec>) -> Result<FitResult> {
    let restarts = ctx.cfg.ascent.restarts;
    let results: Vec<Option<(Vec<StageRule>, Vec<Vec<u8>>, f64, usize)>> = (0..restarts)
        .into_par_iter()
        .map(|r| run_restart(ctx, budget, r))
        .collect();
    let mut best: Option<(usize, (Vec<StageRule>, Vec<Vec<u8>>, f64, usize))> = None;
    let mut failed = 0usize;
    for (r, out) in results.into_iter().enumerate() {
        match out {
            Some(res) => {
                let better = match &best {
                    None => true,
                    Some((_, cur)) => res.2 > cur.2,
                };
                if better {
                    best = Some((r, res));
                }
            }
            None => failed += 1,
        }
    }
    let (_, (rules, _assigns, _value, sweeps)) = best.ok_or(Error::NoFeasibleDtr)?;
    let mut warnings = Vec::new();
    if failed > 0 {
        warnings.push(format!(
            "{failed} of {restarts} restarts could not reach a feasible configuration"
        ));
    }
    ctx.finalize(rules, SearchStrategy::CoordinateAscent, sweeps, warnings)
}

// ── Q-learning baseline ──────────────────────────────────────────────────────

/// Least-squares fit with explicit rank checking; returns the coefficient
/// vector of `X β ≈ y`.
fn ols(rows: &[Vec<f64>], y: &[f64], what: &str) -> Result<Vec<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    let x = nalgebra::DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    let b = nalgebra::DVector::from_column_slice(y);
    let svd = x.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = smax * (nrows.max(ncols) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < ncols {
        return Err(Error::RankDeficient { what: what.into() });
    }
    let beta = svd
        .solve(&b, tol)
        .map_err(|_| Error::RankDeficient { what: what.into() })?;
    Ok(beta.iter().cloned().collect())
}

/// Two-stage regression baseline.
///
/// Stage 2 regresses `Y_2` on `(1, Y_1, D_2, D_2·D_1, D_2·Y_1)`; the stage-2
/// rule treats when the fitted treatment effect `γ̂_02 + γ̂_12·d_1 + γ̂_22·y_1`
/// is non-negative. Stage 1 regresses the pseudo-outcome
/// `Ṽ = α̂_02 + α̂_12·Y_1 + max(0, γ̂_02 + γ̂_12·D_1 + γ̂_22·Y_1)` on
/// `(1, X_1, D_1, D_1·X_1)` and thresholds the fitted effect likewise. The
/// returned welfare is the same IPW criterion the other estimators report, so
/// results are directly comparable.
pub fn fit_qlearning(
    ds: &PanelDataset,
    pm: &PropensityModel,
    cfg: &EstimationConfig,
) -> Result<FitResult> {
    if ds.horizon != 2 {
        return Err(Error::UnsupportedHorizon {
            op: "fit_qlearning",
            required: 2,
            got: ds.horizon,
        });
    }
    if cfg.weights.gamma != [0.0, 1.0] {
        return Err(Error::UnsupportedGamma {
            op: "fit_qlearning",
            required: "(0, 1)".into(),
            got: format!("{:?}", cfg.weights.gamma),
        });
    }
    cfg.validate()?;
    if ds.n() == 0 {
        return Err(Error::EmptyDataset);
    }

    let n = ds.n();
    let k1 = ds.covariate_dims[0];
    let mut design2 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);
    for traj in &ds.trajectories {
        let d1 = f64::from(traj.treatments[0]);
        let d2 = f64::from(traj.treatments[1]);
        let y1 = traj.outcomes[0];
        design2.push(vec![1.0, y1, d2, d2 * d1, d2 * y1]);
        y2.push(traj.outcomes[1]);
    }
    let beta2 = ols(&design2, &y2, "stage-2 outcome model")?;
    let (a02, a12, g02, g12, g22) = (beta2[0], beta2[1], beta2[2], beta2[3], beta2[4]);
    // Stage-2 history layout is (d_1, y_1, covariates…).
    let rule2 = StageRule::linear(
        2,
        vec![FeatureRef::Single(0), FeatureRef::Single(1)],
        vec![g02, g12, g22],
    );

    let mut design1 = Vec::with_capacity(n);
    let mut vtilde = Vec::with_capacity(n);
    for traj in &ds.trajectories {
        let d1 = f64::from(traj.treatments[0]);
        let y1 = traj.outcomes[0];
        let effect = g02 + g12 * d1 + g22 * y1;
        vtilde.push(a02 + a12 * y1 + effect.max(0.0));
        let mut row = Vec::with_capacity(2 * k1 + 2);
        row.push(1.0);
        row.extend_from_slice(&traj.covariates[0]);
        row.push(d1);
        for x in &traj.covariates[0] {
            row.push(d1 * x);
        }
        design1.push(row);
    }
    let beta1 = ols(&design1, &vtilde, "stage-1 value model")?;
    // Coefficients order: intercept, X_1 block, D_1, D_1·X_1 block; the rule
    // thresholds the treatment-effect part (D_1 coefficient onward).
    let g01 = beta1[1 + k1];
    let g1x = &beta1[2 + k1..];
    let mut beta_rule1 = Vec::with_capacity(k1 + 1);
    beta_rule1.push(g01);
    beta_rule1.extend_from_slice(g1x);
    let rule1 = StageRule::linear(1, (0..k1).map(FeatureRef::Single).collect(), beta_rule1);

    let ctx_cfg = cfg;
    let ctx = QlearningFinalizer {
        ds,
        pm,
        cfg: ctx_cfg,
    };
    ctx.finalize(vec![rule1, rule2])
}

/// Minimal finalizer for the regression baseline, which does not build stage
/// solvers.
struct QlearningFinalizer<'a> {
    ds: &'a PanelDataset,
    pm: &'a PropensityModel,
    cfg: &'a EstimationConfig,
}

impl<'a> QlearningFinalizer<'a> {
    fn finalize(&self, rules: Vec<StageRule>) -> Result<FitResult> {
        let mut dtr = Dtr::new(rules);
        if self.ds.demeaned {
            dtr.outcome_offsets = self.ds.outcome_means.clone();
        }
        let welfare = empirical_welfare(self.ds, &dtr, self.pm, &self.cfg.weights)?;
        let mut warnings = Vec::new();
        let mut stage_shares = Vec::with_capacity(self.ds.horizon);
        for t in 1..=self.ds.horizon {
            let share = empirical_treated_share(self.ds, &dtr, t)?;
            if share.empty_path {
                warnings.push(format!(
                    "stage {t} treated share conditions on an empty path; reported as 0"
                ));
            }
            stage_shares.push(share.share);
        }
        Ok(FitResult {
            dtr,
            empirical_welfare: welfare,
            stage_shares,
            budget_lhs: Vec::new(),
            warnings,
            sweeps: 0,
            strategy: SearchStrategy::Regression,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use crate::welfare::BudgetRow;
    use rand::Rng;

    fn traj(id: usize, d: &[u8], y: &[f64], x1: f64) -> Trajectory {
        let horizon = d.len();
        let mut covariates = vec![Vec::new(); horizon];
        covariates[0] = vec![x1];
        Trajectory {
            id: id.to_string(),
            treatments: d.to_vec(),
            outcomes: y.to_vec(),
            covariates,
        }
    }

    fn random_two_stage(n: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let trajectories = (0..n)
            .map(|i| {
                let d = [u8::from(rng.gen::<bool>()), u8::from(rng.gen::<bool>())];
                let y = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                let x1 = rng.gen_range(-1.0..1.0);
                traj(i, &d, &y, x1)
            })
            .collect();
        PanelDataset::new(trajectories, 2, vec![1, 0]).unwrap()
    }

    fn constants_cfg(horizon: usize, gamma: Vec<f64>) -> EstimationConfig {
        EstimationConfig::new(
            WelfareWeights::new(gamma).unwrap(),
            PolicyClassSpec::new(vec![StageClassSpec::Constants; horizon]),
        )
    }

    fn halves() -> PropensityModel {
        PropensityModel::known_constant(2, 0.5).unwrap()
    }

    #[test]
    fn exhaustive_constants_equals_brute_force() {
        let ds = random_two_stage(60, 5);
        let pm = halves();
        let cfg = constants_cfg(2, vec![1.0, 1.0]);
        let fit = fit_simultaneous(&ds, &pm, &cfg).unwrap();
        assert_eq!(fit.strategy, SearchStrategy::Exhaustive);
        let mut best = f64::NEG_INFINITY;
        for g1 in 0..2u8 {
            for g2 in 0..2u8 {
                let dtr = Dtr::new(vec![StageRule::constant(1, g1), StageRule::constant(2, g2)]);
                let w = empirical_welfare(&ds, &dtr, &pm, &cfg.weights).unwrap();
                best = best.max(w);
            }
        }
        assert_eq!(fit.empirical_welfare, best);
    }

    #[test]
    fn one_stage_backward_equals_simultaneous() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let trajectories: Vec<Trajectory> = (0..40)
            .map(|i| Trajectory {
                id: i.to_string(),
                treatments: vec![u8::from(rng.gen::<bool>())],
                outcomes: vec![rng.gen_range(-2.0..2.0)],
                covariates: vec![vec![rng.gen_range(-1.0..1.0)]],
            })
            .collect();
        let ds = PanelDataset::new(trajectories, 1, vec![1]).unwrap();
        let pm = PropensityModel::known_constant(1, 0.5).unwrap();
        let cfg = EstimationConfig::new(
            WelfareWeights::new(vec![1.0]).unwrap(),
            PolicyClassSpec::new(vec![StageClassSpec::linear(vec![FeatureRef::Single(0)])]),
        );
        let back = fit_backward(&ds, &pm, &cfg).unwrap();
        let sim = fit_simultaneous(&ds, &pm, &cfg).unwrap();
        assert_eq!(back.dtr.rules, sim.dtr.rules);
        assert_eq!(back.empirical_welfare, sim.empirical_welfare);
    }

    #[test]
    fn flat_objective_takes_first_candidate() {
        let mut ds = random_two_stage(30, 11);
        for traj in &mut ds.trajectories {
            traj.outcomes = vec![0.0, 0.0];
        }
        let pm = halves();
        let cfg = constants_cfg(2, vec![1.0, 1.0]);
        let fit = fit_backward(&ds, &pm, &cfg).unwrap();
        for rule in &fit.dtr.rules {
            assert_eq!(*rule, StageRule::constant(rule.stage, 0));
        }
        assert_eq!(fit.empirical_welfare, 0.0);
    }

    #[test]
    fn welfare_is_self_consistent() {
        let ds = random_two_stage(80, 13);
        let pm = halves();
        let mut cfg = EstimationConfig::new(
            WelfareWeights::new(vec![0.5, 1.0]).unwrap(),
            PolicyClassSpec::new(vec![
                StageClassSpec::linear(vec![FeatureRef::Single(0)]),
                StageClassSpec::linear(vec![FeatureRef::Single(0), FeatureRef::Single(1)]),
            ]),
        );
        cfg.exhaustive_cap = 1; // force coordinate ascent
        cfg.bilevel_cells_cap = 0;
        let fit = fit_simultaneous(&ds, &pm, &cfg).unwrap();
        assert_eq!(fit.strategy, SearchStrategy::CoordinateAscent);
        let recomputed = empirical_welfare(&ds, &fit.dtr, &pm, &cfg.weights).unwrap();
        assert!((fit.empirical_welfare - recomputed).abs() < 1e-10);
        assert!(fit.sweeps >= 1 && fit.sweeps <= cfg.ascent.max_sweeps);
    }

    #[test]
    fn ascent_matches_exhaustive_on_constants() {
        for seed in 0..8 {
            let ds = random_two_stage(40, 100 + seed);
            let pm = halves();
            let cfg = constants_cfg(2, vec![1.0, 1.0]);
            let exhaustive = fit_simultaneous(&ds, &pm, &cfg).unwrap();
            let mut cfg_b = cfg.clone();
            cfg_b.exhaustive_cap = 1;
            cfg_b.bilevel_cells_cap = 0;
            let ascent = fit_simultaneous(&ds, &pm, &cfg_b).unwrap();
            assert!(
                (ascent.empirical_welfare - exhaustive.empirical_welfare).abs() < 1e-12,
                "seed {seed}: ascent {} vs exhaustive {}",
                ascent.empirical_welfare,
                exhaustive.empirical_welfare
            );
        }
    }

    #[test]
    fn bilevel_matches_exhaustive_welfare() {
        for seed in 0..8 {
            let ds = random_two_stage(35, 300 + seed);
            let pm = halves();
            let cfg = EstimationConfig::new(
                WelfareWeights::new(vec![0.5, 1.0]).unwrap(),
                PolicyClassSpec::new(vec![
                    StageClassSpec::linear(vec![FeatureRef::Single(0)]),
                    StageClassSpec::linear(vec![FeatureRef::Single(0), FeatureRef::Single(1)]),
                ]),
            );
            let exhaustive = fit_simultaneous(&ds, &pm, &cfg).unwrap();
            assert_eq!(exhaustive.strategy, SearchStrategy::Exhaustive);
            let mut cfg_b = cfg.clone();
            cfg_b.exhaustive_cap = 1;
            let bilevel = fit_simultaneous(&ds, &pm, &cfg_b).unwrap();
            assert_eq!(bilevel.strategy, SearchStrategy::Bilevel);
            assert!(
                (bilevel.empirical_welfare - exhaustive.empirical_welfare).abs() < 1e-12,
                "seed {seed}: bilevel {} vs exhaustive {}",
                bilevel.empirical_welfare,
                exhaustive.empirical_welfare
            );
        }
    }

    #[test]
    fn zero_budget_forces_zero_treatment() {
        let ds = random_two_stage(50, 17);
        let pm = halves();
        let mut cfg = constants_cfg(2, vec![1.0, 1.0]);
        cfg.budget = Some(
            BudgetSpec::new(
                vec![BudgetRow {
                    k: vec![0.5, 0.5],
                    c: 0.0,
                }],
                0.0,
            )
            .unwrap(),
        );
        let fit = fit_simultaneous_budget(&ds, &pm, &cfg).unwrap();
        assert_eq!(fit.stage_shares, vec![0.0, 0.0]);
        assert!(fit.budget_lhs[0] <= 1e-12);
        for rule in &fit.dtr.rules {
            assert_eq!(*rule, StageRule::constant(rule.stage, 0));
        }
    }

    #[test]
    fn budget_brute_force_on_constants() {
        let ds = random_two_stage(64, 19);
        let pm = halves();
        let mut cfg = constants_cfg(2, vec![1.0, 1.0]);
        let spec = BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.5, 0.5],
                c: 0.5,
            }],
            0.0,
        )
        .unwrap();
        cfg.budget = Some(spec.clone());
        let fit = fit_simultaneous_budget(&ds, &pm, &cfg).unwrap();
        let mut best = f64::NEG_INFINITY;
        for g1 in 0..2u8 {
            for g2 in 0..2u8 {
                let dtr = Dtr::new(vec![StageRule::constant(1, g1), StageRule::constant(2, g2)]);
                if !crate::welfare::budget_feasible(&ds, &dtr, &spec).unwrap() {
                    continue;
                }
                best = best.max(empirical_welfare(&ds, &dtr, &pm, &cfg.weights).unwrap());
            }
        }
        assert_eq!(fit.empirical_welfare, best);
        assert!(crate::welfare::budget_feasible(&ds, &fit.dtr, &spec).unwrap());
    }

    #[test]
    fn slack_budget_matches_unconstrained() {
        let ds = random_two_stage(70, 23);
        let pm = halves();
        let free_cfg = EstimationConfig::new(
            WelfareWeights::new(vec![1.0, 1.0]).unwrap(),
            PolicyClassSpec::new(vec![
                StageClassSpec::linear(vec![FeatureRef::Single(0)]),
                StageClassSpec::linear(vec![FeatureRef::Single(1)]),
            ]),
        );
        let mut slack_cfg = free_cfg.clone();
        slack_cfg.budget = Some(
            BudgetSpec::new(
                vec![BudgetRow {
                    k: vec![0.5, 0.5],
                    c: 1.0,
                }],
                0.0,
            )
            .unwrap(),
        );
        let free = fit_simultaneous(&ds, &pm, &free_cfg).unwrap();
        let constrained = fit_simultaneous_budget(&ds, &pm, &slack_cfg).unwrap();
        assert_eq!(free.dtr.rules, constrained.dtr.rules);
        assert_eq!(free.empirical_welfare, constrained.empirical_welfare);
    }

    #[test]
    fn budget_rows_match_welfare_module() {
        let ds = random_two_stage(40, 29);
        let spec = BudgetSpec::new(
            vec![
                BudgetRow {
                    k: vec![1.0, 0.0],
                    c: 0.4,
                },
                BudgetRow {
                    k: vec![0.25, 0.75],
                    c: 0.6,
                },
            ],
            0.05,
        )
        .unwrap();
        let pm = halves();
        let mut cfg = constants_cfg(2, vec![1.0, 1.0]);
        cfg.budget = Some(spec.clone());
        let ctx = FitContext::build(&ds, &pm, &cfg).unwrap();
        for g1 in 0..2u8 {
            for g2 in 0..2u8 {
                let dtr = Dtr::new(vec![StageRule::constant(1, g1), StageRule::constant(2, g2)]);
                let a1 = vec![g1; ds.n()];
                let a2 = vec![g2; ds.n()];
                let (lhs, _) = ctx.budget_rows_of(&spec, &[&a1, &a2], 2);
                for b in 0..spec.rows.len() {
                    let official = budget_lhs(&ds, &dtr, &spec, b).unwrap().cost;
                    assert_eq!(lhs[b], official, "g=({g1},{g2}) row {b}");
                }
            }
        }
    }

    #[test]
    fn start_time_constraint_holds_pointwise() {
        let ds = random_two_stage(60, 31);
        let pm = halves();
        let mut cfg = EstimationConfig::new(
            WelfareWeights::new(vec![1.0, 1.0]).unwrap(),
            PolicyClassSpec::new(vec![
                StageClassSpec::linear(vec![FeatureRef::Single(0)]),
                StageClassSpec::linear(vec![FeatureRef::Single(1)]),
            ])
            .with_intertemporal(IntertemporalKind::StartTime),
        );
        for cap in [u64::MAX, 1] {
            cfg.exhaustive_cap = if cap == 1 { 1 } else { 1_000_000 };
            let fit = fit_simultaneous(&ds, &pm, &cfg).unwrap();
            for traj in &ds.trajectories {
                let a1 = fit.dtr.assign(traj, 1, None).unwrap();
                let a2 = fit.dtr.assign(traj, 2, None).unwrap();
                assert!(a1 <= a2, "start-time violated on {}", traj.id);
            }
        }
    }

    #[test]
    fn backward_rejects_budget() {
        let ds = random_two_stage(10, 37);
        let pm = halves();
        let mut cfg = constants_cfg(2, vec![1.0, 1.0]);
        cfg.budget = Some(
            BudgetSpec::new(
                vec![BudgetRow {
                    k: vec![0.5, 0.5],
                    c: 0.5,
                }],
                0.0,
            )
            .unwrap(),
        );
        assert!(matches!(
            fit_backward(&ds, &pm, &cfg),
            Err(Error::InvalidBudget { .. })
        ));
    }

    #[test]
    fn default_alpha_reference_value() {
        let a = default_alpha(1, 0.05, 200);
        assert!((a - 0.109_40).abs() < 1e-4, "got {a}");
        let quartered = default_alpha(1, 0.05, 800);
        assert!((quartered - a / 2.0).abs() < 1e-12);
    }

    #[test]
    fn qlearning_null_outcomes_treat_by_tie() {
        let mut ds = random_two_stage(50, 41);
        for traj in &mut ds.trajectories {
            traj.outcomes[1] = 0.0;
        }
        let pm = halves();
        let cfg = constants_cfg(2, vec![0.0, 1.0]);
        let fit = fit_qlearning(&ds, &pm, &cfg).unwrap();
        match &fit.dtr.rules[1].kind {
            crate::policy::RuleKind::Linear { beta, .. } => {
                for b in beta {
                    assert!(b.abs() < 1e-10, "beta {beta:?}");
                }
            }
            other => panic!("unexpected stage-2 rule {other:?}"),
        }
        for traj in &ds.trajectories {
            assert_eq!(fit.dtr.assign(traj, 2, None).unwrap(), 1);
        }
    }

    #[test]
    fn qlearning_recovers_positive_effect() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let trajectories: Vec<Trajectory> = (0..400)
            .map(|i| {
                let d1 = u8::from(rng.gen::<bool>());
                let d2 = u8::from(rng.gen::<bool>());
                let x1: f64 = rng.gen_range(-1.0..1.0);
                let y1 = x1 + f64::from(d1) + 0.1 * rng.gen_range(-1.0..1.0);
                let y2 = f64::from(d2) * (1.0 + f64::from(d1)) + 0.1 * rng.gen_range(-1.0..1.0);
                traj(i, &[d1, d2], &[y1, y2], x1)
            })
            .collect();
        let ds = PanelDataset::new(trajectories, 2, vec![1, 0]).unwrap();
        let pm = halves();
        let cfg = constants_cfg(2, vec![0.0, 1.0]);
        let fit = fit_qlearning(&ds, &pm, &cfg).unwrap();
        // The stage-2 effect 1 + d_1 is positive everywhere: always treat.
        for traj in &ds.trajectories {
            assert_eq!(fit.dtr.assign(traj, 2, None).unwrap(), 1);
        }
    }

    #[test]
    fn qlearning_rejects_wrong_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let trajectories: Vec<Trajectory> = (0..10)
            .map(|i| Trajectory {
                id: i.to_string(),
                treatments: vec![u8::from(rng.gen::<bool>())],
                outcomes: vec![rng.gen_range(-1.0..1.0)],
                covariates: vec![vec![rng.gen_range(-1.0..1.0)]],
            })
            .collect();
        let one_stage = PanelDataset::new(trajectories, 1, vec![1]).unwrap();
        let pm1 = PropensityModel::known_constant(1, 0.5).unwrap();
        let cfg1 = EstimationConfig::new(
            WelfareWeights::new(vec![1.0]).unwrap(),
            PolicyClassSpec::new(vec![StageClassSpec::Constants]),
        );
        assert!(matches!(
            fit_qlearning(&one_stage, &pm1, &cfg1),
            Err(Error::UnsupportedHorizon { .. })
        ));

        let ds = random_two_stage(30, 49);
        let pm = halves();
        let cfg = constants_cfg(2, vec![1.0, 1.0]);
        assert!(matches!(
            fit_qlearning(&ds, &pm, &cfg),
            Err(Error::UnsupportedGamma { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = constants_cfg(2, vec![1.0, 1.0]);
        cfg.ascent.restarts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = constants_cfg(2, vec![1.0, 1.0]);
        cfg.delta = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn demeaned_fit_carries_offsets() {
        let ds = random_two_stage(40, 53);
        let demeaned = crate::data::demean_outcomes(&ds).unwrap();
        let pm = halves();
        let cfg = EstimationConfig::new(
            WelfareWeights::new(vec![1.0, 1.0]).unwrap(),
            PolicyClassSpec::new(vec![
                StageClassSpec::linear(vec![FeatureRef::Single(0)]),
                StageClassSpec::linear(vec![FeatureRef::Single(1)]),
            ]),
        );
        let fit = fit_simultaneous(&demeaned, &pm, &cfg).unwrap();
        let offsets = fit.dtr.outcome_offsets.as_ref().expect("offsets recorded");
        assert_eq!(offsets.len(), 2);
        // Deployment on the raw data must agree with in-sample assignments on
        // the demeaned data.
        let off = fit.dtr.offsets_for(&ds);
        assert!(off.is_some());
        for (raw, centered) in ds.trajectories.iter().zip(&demeaned.trajectories) {
            for t in 1..=2 {
                let a_raw = fit.dtr.assign(raw, t, off).unwrap();
                let a_centered = fit.dtr.assign(centered, t, None).unwrap();
                assert_eq!(a_raw, a_centered);
            }
        }
    }
}
