//! Empirical objectives: IPW welfare, backward stage objectives, treated
//! shares, and budget costs.
//!
//! The central quantity is the inverse-propensity-weighted sample welfare of
//! a regime `g`:
//!
//! ```text
//! Ŵ(g) = (1/n) Σ_i Σ_t [ Π_{s≤t} 1{g_s(H_is)=D_is} ] · γ_t · Y_it / Π_{s≤t} e_s(D_is,H_is)
//! ```
//!
//! Backward estimation maximizes the stage objective built from the same
//! summands but started at stage `t` with future rules fixed. Budget
//! constraints compare convex combinations of conditional treated shares
//! against a cap plus slack.
//!
//! Outcomes are used exactly as stored: a demeaned dataset yields welfare in
//! demeaned units (the raw-vs-demeaned choice is a dataset property). Rules
//! fitted on demeaned data carry outcome offsets which are applied to rule
//! inputs when — and only when — the dataset being evaluated is raw.

use serde::Serialize;

use crate::data::{history, PanelDataset};
use crate::error::{Error, Result};
use crate::policy::{Dtr, StageRule};
use crate::propensity::{propensity_at, PropensityModel};

/// Stage weights γ_1..γ_T, each in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct WelfareWeights {
    pub gamma: Vec<f64>,
}

impl WelfareWeights {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::InvalidGamma {
                message: "weight vector is empty".into(),
            });
        }
        if let Some(bad) = gamma.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::InvalidGamma {
                message: format!("weights must lie in [0,1], got {bad}"),
            });
        }
        Ok(WelfareWeights { gamma })
    }

    /// Weight on the terminal stage only: γ = (0, .., 0, 1).
    pub fn terminal(horizon: usize) -> Self {
        let mut gamma = vec![0.0; horizon];
        gamma[horizon - 1] = 1.0;
        WelfareWeights { gamma }
    }

    pub fn horizon(&self) -> usize {
        self.gamma.len()
    }
}

/// One budget row: cost weights over stages and a cap.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetRow {
    /// K_1b..K_Tb, in [0,1], summing to 1.
    pub k: Vec<f64>,
    /// Budget level C_b ≥ 0.
    pub c: f64,
}

/// Budget/capacity constraints with slack.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSpec {
    pub rows: Vec<BudgetRow>,
    /// Sample slack α_n ≥ 0 added to each cap.
    pub alpha_n: f64,
    /// When true, a regime whose conditional share at some stage has an empty
    /// conditioning path is treated as infeasible rather than zero-cost.
    pub strict_empty_paths: bool,
}

impl BudgetSpec {
    pub fn new(rows: Vec<BudgetRow>, alpha_n: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidBudget {
                message: "no budget rows".into(),
            });
        }
        if alpha_n < 0.0 || !alpha_n.is_finite() {
            return Err(Error::InvalidBudget {
                message: format!("slack must be non-negative, got {alpha_n}"),
            });
        }
        for (b, row) in rows.iter().enumerate() {
            if row.c < 0.0 || !row.c.is_finite() {
                return Err(Error::InvalidBudget {
                    message: format!("row {b}: budget level must be non-negative, got {}", row.c),
                });
            }
            if row.k.iter().any(|k| !(0.0..=1.0).contains(k)) {
                return Err(Error::InvalidBudget {
                    message: format!("row {b}: cost weights must lie in [0,1]"),
                });
            }
            let total: f64 = row.k.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidBudget {
                    message: format!("row {b}: cost weights sum to {total}, expected 1"),
                });
            }
        }
        Ok(BudgetSpec {
            rows,
            alpha_n,
            strict_empty_paths: false,
        })
    }

    pub fn with_strict_empty_paths(mut self) -> Self {
        self.strict_empty_paths = true;
        self
    }
}

/// A conditional treated share, flagged when its conditioning path is empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ShareEstimate {
    pub share: f64,
    pub empty_path: bool,
}

/// Realized cost of one budget row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetCost {
    pub cost: f64,
    /// True when any contributing share had an empty conditioning path.
    pub empty_path: bool,
}

fn check_dims(
    ds: &PanelDataset,
    dtr: &Dtr,
    pm: &PropensityModel,
    w: &WelfareWeights,
) -> Result<()> {
    if dtr.horizon() != ds.horizon {
        return Err(Error::DimensionMismatch {
            what: "regime stages".into(),
            expected: ds.horizon,
            got: dtr.horizon(),
        });
    }
    if pm.horizon() != ds.horizon {
        return Err(Error::DimensionMismatch {
            what: "propensity stages".into(),
            expected: ds.horizon,
            got: pm.horizon(),
        });
    }
    if w.horizon() != ds.horizon {
        return Err(Error::DimensionMismatch {
            what: "welfare weights".into(),
            expected: ds.horizon,
            got: w.horizon(),
        });
    }
    Ok(())
}

/// Sample IPW welfare of a regime.
pub fn empirical_welfare(
    ds: &PanelDataset,
    dtr: &Dtr,
    pm: &PropensityModel,
    w: &WelfareWeights,
) -> Result<f64> {
    check_dims(ds, dtr, pm, w)?;
    let offsets = dtr.offsets_for(ds);
    let mut total = 0.0;
    for traj in &ds.trajectories {
        let mut inv_e = 1.0;
        for t in 1..=ds.horizon {
            if dtr.assign(traj, t, offsets)? != traj.treatments[t - 1] {
                break;
            }
            let e = propensity_at(pm, t, traj.treatments[t - 1], &history(traj, t))?;
            inv_e /= e;
            total += w.gamma[t - 1] * traj.outcomes[t - 1] * inv_e;
        }
    }
    Ok(total / ds.n() as f64)
}

/// Backward stage objective: expected remaining welfare from stage `t` when
/// `g_t` decides stage `t` and `future` (already-fitted rules for stages
/// `t+1..T`) decide the rest.
pub fn backward_objective(
    ds: &PanelDataset,
    t: usize,
    g_t: &StageRule,
    future: &[StageRule],
    pm: &PropensityModel,
    w: &WelfareWeights,
) -> Result<f64> {
    ds.check_stage(t)?;
    if future.len() != ds.horizon - t {
        return Err(Error::DimensionMismatch {
            what: format!("future rules after stage {t}"),
            expected: ds.horizon - t,
            got: future.len(),
        });
    }
    if g_t.stage != t {
        return Err(Error::StageOutOfRange {
            stage: g_t.stage,
            horizon: t,
        });
    }
    let rule_at = |s: usize| -> &StageRule {
        if s == t {
            g_t
        } else {
            &future[s - t - 1]
        }
    };
    let mut total = 0.0;
    for traj in &ds.trajectories {
        let mut inv_e = 1.0;
        for s in t..=ds.horizon {
            let h = history(traj, s);
            if crate::policy::apply_rule(rule_at(s), &h)? != traj.treatments[s - 1] {
                break;
            }
            let e = propensity_at(pm, s, traj.treatments[s - 1], &h)?;
            inv_e /= e;
            total += w.gamma[s - 1] * traj.outcomes[s - 1] * inv_e;
        }
    }
    Ok(total / ds.n() as f64)
}

/// Conditional treated share at stage `t`: the fraction of observations whose
/// observed treatments followed the regime through stage `t−1` that the
/// regime would treat at stage `t`.
///
/// An empty conditioning path yields share 0 with the `empty_path` flag set.
pub fn empirical_treated_share(ds: &PanelDataset, dtr: &Dtr, t: usize) -> Result<ShareEstimate> {
    ds.check_stage(t)?;
    let offsets = dtr.offsets_for(ds);
    let mut num = 0.0;
    let mut den = 0.0;
    for traj in &ds.trajectories {
        let mut on_path = true;
        for s in 1..t {
            if dtr.assign(traj, s, offsets)? != traj.treatments[s - 1] {
                on_path = false;
                break;
            }
        }
        if on_path {
            den += 1.0;
            num += f64::from(dtr.assign(traj, t, offsets)?);
        }
    }
    if den == 0.0 {
        Ok(ShareEstimate {
            share: 0.0,
            empty_path: true,
        })
    } else {
        Ok(ShareEstimate {
            share: num / den,
            empty_path: false,
        })
    }
}

/// Left-hand side of budget row `b`: `Σ_t K_tb · share_t`. Always in [0,1].
pub fn budget_lhs(ds: &PanelDataset, dtr: &Dtr, spec: &BudgetSpec, b: usize) -> Result<BudgetCost> {
    let row = spec.rows.get(b).ok_or_else(|| Error::InvalidBudget {
        message: format!("budget row {b} out of range ({} rows)", spec.rows.len()),
    })?;
    if row.k.len() != ds.horizon {
        return Err(Error::DimensionMismatch {
            what: format!("budget row {b} weights"),
            expected: ds.horizon,
            got: row.k.len(),
        });
    }
    let mut cost = 0.0;
    let mut empty_path = false;
    for t in 1..=ds.horizon {
        let share = empirical_treated_share(ds, dtr, t)?;
        cost += row.k[t - 1] * share.share;
        empty_path |= share.empty_path;
    }
    Ok(BudgetCost { cost, empty_path })
}

/// Whether a regime satisfies every budget row within the slack. Under
/// `strict_empty_paths`, any empty conditioning path is infeasible.
pub fn budget_feasible(ds: &PanelDataset, dtr: &Dtr, spec: &BudgetSpec) -> Result<bool> {
    for (b, row) in spec.rows.iter().enumerate() {
        let lhs = budget_lhs(ds, dtr, spec, b)?;
        if lhs.empty_path && spec.strict_empty_paths {
            return Ok(false);
        }
        if lhs.cost > row.c + spec.alpha_n {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Summary of a regime's objectives on a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct WelfareReport {
    pub welfare: f64,
    /// Conditional treated share per stage.
    pub shares: Vec<ShareEstimate>,
    /// Realized budget costs and caps, when a budget applies.
    pub budget: Option<Vec<BudgetRowReport>>,
    pub warnings: Vec<String>,
}

/// One budget row's realized cost against its cap.
#[derive(Debug, Clone, Serialize)]
pub struct BudgetRowReport {
    pub cost: f64,
    pub cap: f64,
    pub slack: f64,
    pub feasible: bool,
    pub empty_path: bool,
}

/// Evaluates welfare, shares, and budget rows in one pass.
pub fn welfare_report(
    ds: &PanelDataset,
    dtr: &Dtr,
    pm: &PropensityModel,
    w: &WelfareWeights,
    budget: Option<&BudgetSpec>,
) -> Result<WelfareReport> {
    let welfare = empirical_welfare(ds, dtr, pm, w)?;
    let mut warnings = Vec::new();
    let mut shares = Vec::with_capacity(ds.horizon);
    for t in 1..=ds.horizon {
        let s = empirical_treated_share(ds, dtr, t)?;
        if s.empty_path {
            warnings.push(format!(
                "stage {t}: no observation follows the regime through stage {}; share set to 0",
                t - 1
            ));
        }
        shares.push(s);
    }
    let budget = budget
        .map(|spec| {
            spec.rows
                .iter()
                .enumerate()
                .map(|(b, row)| {
                    let lhs = budget_lhs(ds, dtr, spec, b)?;
                    Ok(BudgetRowReport {
                        cost: lhs.cost,
                        cap: row.c,
                        slack: spec.alpha_n,
                        feasible: lhs.cost <= row.c + spec.alpha_n
                            && !(lhs.empty_path && spec.strict_empty_paths),
                        empty_path: lhs.empty_path,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(WelfareReport {
        welfare,
        shares,
        budget,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use crate::policy::{FeatureRef, StageRule};

    fn one_stage_toy() -> PanelDataset {
        let mk = |id: &str, d: u8, y: f64| Trajectory {
            id: id.into(),
            treatments: vec![d],
            outcomes: vec![y],
            covariates: vec![vec![]],
        };
        PanelDataset::new(vec![mk("a", 1, 2.0), mk("b", 0, 4.0)], 1, vec![0]).unwrap()
    }

    fn const_dtr(values: &[u8]) -> Dtr {
        Dtr::new(
            values
                .iter()
                .enumerate()
                .map(|(t, &v)| StageRule::constant(t + 1, v))
                .collect(),
        )
    }

    #[test]
    fn one_stage_ipw_means() {
        let ds = one_stage_toy();
        let pm = PropensityModel::known_constant(1, 0.5).unwrap();
        let w = WelfareWeights::new(vec![1.0]).unwrap();
        assert_eq!(
            empirical_welfare(&ds, &const_dtr(&[1]), &pm, &w).unwrap(),
            2.0
        );
        assert_eq!(
            empirical_welfare(&ds, &const_dtr(&[0]), &pm, &w).unwrap(),
            4.0
        );
    }

    #[test]
    fn zero_outcomes_zero_welfare() {
        let mut ds = one_stage_toy();
        for traj in &mut ds.trajectories {
            traj.outcomes = vec![0.0];
        }
        let pm = PropensityModel::known_constant(1, 0.5).unwrap();
        let w = WelfareWeights::new(vec![1.0]).unwrap();
        assert_eq!(
            empirical_welfare(&ds, &const_dtr(&[1]), &pm, &w).unwrap(),
            0.0
        );
    }

    #[test]
    fn terminal_stage_backward_matches_ipw_mean() {
        let ds = one_stage_toy();
        let pm = PropensityModel::known_constant(1, 0.5).unwrap();
        let w = WelfareWeights::new(vec![1.0]).unwrap();
        let g = StageRule::constant(1, 1);
        assert_eq!(backward_objective(&ds, 1, &g, &[], &pm, &w).unwrap(), 2.0);
    }

    #[test]
    fn zero_weights_zero_objective() {
        let ds = one_stage_toy();
        let pm = PropensityModel::known_constant(1, 0.5).unwrap();
        let w = WelfareWeights::new(vec![0.0]).unwrap();
        let g = StageRule::constant(1, 0);
        assert_eq!(backward_objective(&ds, 1, &g, &[], &pm, &w).unwrap(), 0.0);
    }

    fn two_stage_panel() -> PanelDataset {
        // Four units; x identifies each unit.
        let mk = |id: usize, d1: u8, d2: u8| Trajectory {
            id: id.to_string(),
            treatments: vec![d1, d2],
            outcomes: vec![1.0, 2.0],
            covariates: vec![vec![id as f64], vec![]],
        };
        PanelDataset::new(
            vec![mk(0, 1, 1), mk(1, 1, 0), mk(2, 1, 1), mk(3, 1, 0)],
            2,
            vec![1, 0],
        )
        .unwrap()
    }

    #[test]
    fn unconditional_share_is_plain_mean() {
        let ds = two_stage_panel();
        let share = empirical_treated_share(&ds, &const_dtr(&[1, 1]), 1).unwrap();
        assert_eq!(share.share, 1.0);
        assert!(!share.empty_path);
    }

    #[test]
    fn conditional_share_on_constructed_panel() {
        let ds = two_stage_panel();
        // g1 ≡ 1 matches all four units at stage 1; treat units with x < 2 at
        // stage 2 → 2 of 4.
        let dtr = Dtr::new(vec![
            StageRule::constant(1, 1),
            StageRule::linear(2, vec![FeatureRef::Single(2)], vec![1.5, -1.0]),
        ]);
        let share = empirical_treated_share(&ds, &dtr, 2).unwrap();
        assert_eq!(share.share, 0.5);
        assert!(!share.empty_path);
    }

    #[test]
    fn empty_path_flags_and_zeroes() {
        let ds = two_stage_panel();
        // g1 ≡ 0 matches nobody (all observed d1 = 1).
        let share = empirical_treated_share(&ds, &const_dtr(&[0, 1]), 2).unwrap();
        assert_eq!(share.share, 0.0);
        assert!(share.empty_path);
    }

    #[test]
    fn budget_cost_convex_combination() {
        let n = 100usize;
        let trajectories = (0..n)
            .map(|i| Trajectory {
                id: i.to_string(),
                treatments: vec![u8::from(i < 63), 0],
                outcomes: vec![0.0, 0.0],
                covariates: vec![vec![i as f64], vec![]],
            })
            .collect();
        let ds = PanelDataset::new(trajectories, 2, vec![1, 0]).unwrap();
        // g1 treats exactly the 63 units with x < 63 (all of whom match), g2
        // treats those with x < 37.
        let dtr = Dtr::new(vec![
            StageRule::linear(1, vec![FeatureRef::Single(0)], vec![62.5, -1.0]),
            StageRule::linear(2, vec![FeatureRef::Single(2)], vec![36.5, -1.0]),
        ]);
        assert_eq!(empirical_treated_share(&ds, &dtr, 1).unwrap().share, 0.63);
        assert_eq!(empirical_treated_share(&ds, &dtr, 2).unwrap().share, 0.37);
        let spec = BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.5, 0.5],
                c: 0.5,
            }],
            0.0,
        )
        .unwrap();
        let lhs = budget_lhs(&ds, &dtr, &spec, 0).unwrap();
        assert!((lhs.cost - 0.5).abs() < 1e-12);
        assert!(budget_feasible(&ds, &dtr, &spec).unwrap());
    }

    #[test]
    fn all_zero_dtr_costs_nothing() {
        let ds = two_stage_panel();
        let spec = BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.5, 0.5],
                c: 0.0,
            }],
            0.0,
        )
        .unwrap();
        let dtr = const_dtr(&[0, 0]);
        let lhs = budget_lhs(&ds, &dtr, &spec, 0).unwrap();
        // Stage 1 share is 0; stage 2 conditions on the empty matched set.
        assert_eq!(lhs.cost, 0.0);
        assert!(budget_feasible(&ds, &dtr, &spec).unwrap());
        let strict = BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.5, 0.5],
                c: 0.0,
            }],
            0.0,
        )
        .unwrap()
        .with_strict_empty_paths();
        assert!(!budget_feasible(&ds, &dtr, &strict).unwrap());
    }

    #[test]
    fn full_treatment_exhausts_budget() {
        let ds = two_stage_panel();
        // All units observed d1=1 so g≡(1,1) matches at stage 1; shares (1, 1).
        let spec = BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.5, 0.5],
                c: 1.0,
            }],
            0.0,
        )
        .unwrap();
        let lhs = budget_lhs(&ds, &const_dtr(&[1, 1]), &spec, 0).unwrap();
        assert_eq!(lhs.cost, 1.0);
    }

    #[test]
    fn budget_validation() {
        assert!(BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.7, 0.7],
                c: 0.5
            }],
            0.0
        )
        .is_err());
        assert!(BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.5, 0.5],
                c: -0.1
            }],
            0.0
        )
        .is_err());
        assert!(BudgetSpec::new(
            vec![BudgetRow {
                k: vec![0.5, 0.5],
                c: 0.5
            }],
            -0.01
        )
        .is_err());
    }

    #[test]
    fn gamma_validation() {
        assert!(WelfareWeights::new(vec![0.0, 1.2]).is_err());
        assert!(WelfareWeights::new(vec![-0.1]).is_err());
        assert_eq!(WelfareWeights::terminal(3).gamma, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn welfare_linear_across_halves() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        let trajectories: Vec<Trajectory> = (0..40)
            .map(|i| Trajectory {
                id: i.to_string(),
                treatments: vec![rng.gen_range(0..2), rng.gen_range(0..2)],
                outcomes: vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                covariates: vec![vec![rng.gen_range(-1.0..1.0)], vec![]],
            })
            .collect();
        let first = PanelDataset::new(trajectories[..15].to_vec(), 2, vec![1, 0]).unwrap();
        let second = PanelDataset::new(trajectories[15..].to_vec(), 2, vec![1, 0]).unwrap();
        let full = PanelDataset::new(trajectories, 2, vec![1, 0]).unwrap();
        let dtr = Dtr::new(vec![
            StageRule::linear(1, vec![FeatureRef::Single(0)], vec![0.1, 1.0]),
            StageRule::linear(2, vec![FeatureRef::Single(1)], vec![-0.2, 1.0]),
        ]);
        let pm = PropensityModel::known_constant(2, 0.5).unwrap();
        let w = WelfareWeights::new(vec![0.3, 1.0]).unwrap();
        let combined = (15.0 * empirical_welfare(&first, &dtr, &pm, &w).unwrap()
            + 25.0 * empirical_welfare(&second, &dtr, &pm, &w).unwrap())
            / 40.0;
        let whole = empirical_welfare(&full, &dtr, &pm, &w).unwrap();
        assert!((combined - whole).abs() < 1e-12);
    }

    #[test]
    fn report_serializes_with_warnings() {
        let ds = two_stage_panel();
        let pm = PropensityModel::known_constant(2, 0.5).unwrap();
        let w = WelfareWeights::terminal(2);
        let report = welfare_report(&ds, &const_dtr(&[0, 1]), &pm, &w, None).unwrap();
        assert_eq!(report.welfare, 0.0);
        assert_eq!(report.warnings.len(), 1);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"empty_path\":true"));
    }
}
