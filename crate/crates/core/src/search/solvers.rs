//! Exact stage-level argmax engines.
//!
//! Each estimation step maximizes `Σ_i w_i · g(H_i)` over one stage's rule
//! set under per-observation feasibility constraints. Depending on the class
//! and data, one of four exact engines applies:
//!
//! - `Constants`: the two constant rules.
//! - `Threshold`: a single real feature; the achievable assignments are
//!   exactly the value-sorted suffixes and prefixes, scanned in O(n log n).
//! - `BinarySplit`: one binary feature plus one real feature. Any rule
//!   `β0 + β_b·b + β_c·v ≥ 0` acts as a per-group threshold on `v` with a
//!   shared orientation, and any such pair of thresholds is realizable, so
//!   the two groups decouple and each scans independently.
//! - `Enumerated`: the general hyperplane enumeration from the parent
//!   module, exact for any class but quadratic (or worse) in n.
//!
//! All engines agree exactly with enumeration where both apply; the split
//! engines exist because the Monte Carlo grid calls this argmax hundreds of
//! thousands of times.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::policy::{FeatureRef, SignConstraint, StageClassSpec, StageRule};
use crate::search::{argmax_weighted_rule, enumerate_candidates, enumeration_size, CandidateSet};

/// Per-observation feasibility for a stage argmax.
pub(crate) struct StageConstraint<'a> {
    /// Rows the rule must treat.
    pub must_one: Option<&'a [bool]>,
    /// Rows the rule must not treat.
    pub must_zero: Option<&'a [bool]>,
    /// Arbitrary feasibility predicate over (rule, assignment); used for
    /// budget rows, where feasibility couples all observations.
    pub predicate: Option<&'a mut dyn FnMut(&StageRule, &[u8]) -> bool>,
}

impl<'a> StageConstraint<'a> {
    #[cfg(test)]
    pub fn none() -> Self {
        StageConstraint {
            must_one: None,
            must_zero: None,
            predicate: None,
        }
    }

    fn admits_assignment(&mut self, rule: &StageRule, assign: &[u8]) -> bool {
        if let Some(m1) = self.must_one {
            if m1.iter().zip(assign).any(|(f, a)| *f && *a == 0) {
                return false;
            }
        }
        if let Some(m0) = self.must_zero {
            if m0.iter().zip(assign).any(|(f, a)| *f && *a == 1) {
                return false;
            }
        }
        match &mut self.predicate {
            Some(pred) => pred(rule, assign),
            None => true,
        }
    }
}

/// A winning rule with its induced assignment and objective value.
#[derive(Debug, Clone)]
pub(crate) struct ScoredRule {
    pub rule: StageRule,
    pub assign: Vec<u8>,
    pub value: f64,
}

/// Objective value in row-index summation order, the canonical order shared
/// by all engines so their reported values agree bit for bit.
pub(crate) fn index_order_value(weights: &[f64], assign: &[u8]) -> f64 {
    weights
        .iter()
        .zip(assign)
        .map(|(w, a)| w * f64::from(*a))
        .sum()
}

/// Sort order and equal-value runs of one feature column.
#[derive(Debug, Clone)]
struct SortedColumn {
    /// Row indices sorted by value (ties by row index).
    order: Vec<usize>,
    /// `[start, end)` ranges in `order` sharing one value.
    runs: Vec<(usize, usize)>,
    /// The value of each run.
    run_values: Vec<f64>,
}

impl SortedColumn {
    fn build(rows: &[usize], value_of: impl Fn(usize) -> f64) -> Self {
        let mut order: Vec<usize> = rows.to_vec();
        order.sort_by(|&a, &b| value_of(a).total_cmp(&value_of(b)).then(a.cmp(&b)));
        let mut runs = Vec::new();
        let mut run_values = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let v = value_of(order[start]);
            let mut end = start + 1;
            while end < order.len() && value_of(order[end]) == v {
                end += 1;
            }
            runs.push((start, end));
            run_values.push(v);
            start = end;
        }
        SortedColumn {
            order,
            runs,
            run_values,
        }
    }
}

/// Threshold location for a candidate at `run_idx`, the number of runs left
/// out of the treated side (suffix start for orientation +1, one past the
/// prefix end for −1). Interior cuts sit midway between adjacent run values
/// so boundary rows are classified robustly; the all/none sentinels sit one
/// unit past the extremes. If the midpoint of two adjacent floats rounds onto
/// an endpoint, the cut falls back to the endpoint on the treated side.
fn cut_value(sorted: &SortedColumn, orient: f64, run_idx: usize) -> f64 {
    let r = sorted.runs.len();
    if r == 0 {
        return 0.0;
    }
    if run_idx == 0 {
        sorted.run_values[0] - 1.0
    } else if run_idx < r {
        let a = sorted.run_values[run_idx - 1];
        let b = sorted.run_values[run_idx];
        let m = 0.5 * (a + b);
        if m > a && m < b {
            m
        } else if orient > 0.0 {
            b
        } else {
            a
        }
    } else {
        sorted.run_values[r - 1] + 1.0
    }
}

enum SolverKind {
    Constants,
    Threshold {
        col: usize,
        sorted: SortedColumn,
    },
    BinarySplit {
        bin_col: usize,
        cont_col: usize,
        /// Sorted continuous column within bin-value groups 0 and 1.
        groups: [SortedColumn; 2],
    },
    Enumerated(CandidateSet),
}

/// Stage argmax engine bound to one feature matrix.
pub(crate) struct StageSolver {
    pub stage: usize,
    pub features: Vec<FeatureRef>,
    /// n × p stage feature matrix.
    pub matrix: Vec<Vec<f64>>,
    kind: SolverKind,
}

fn column_is_binary_with_both(matrix: &[Vec<f64>], col: usize) -> bool {
    let mut saw = [false, false];
    for row in matrix {
        match row[col] {
            v if v == 0.0 => saw[0] = true,
            v if v == 1.0 => saw[1] = true,
            _ => return false,
        }
    }
    saw[0] && saw[1]
}

impl StageSolver {
    /// Chooses the fastest exact engine for the class on this data.
    pub fn build(
        stage: usize,
        class: &StageClassSpec,
        matrix: Vec<Vec<f64>>,
        enumeration_budget: u64,
    ) -> Result<Self> {
        let n = matrix.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let (features, kind) = match class {
            StageClassSpec::Constants => (Vec::new(), SolverKind::Constants),
            StageClassSpec::Linear { features, signs } => {
                let p = features.len();
                let unconstrained = signs.iter().all(|s| *s == SignConstraint::Free);
                let kind = if unconstrained && p == 1 {
                    SolverKind::Threshold {
                        col: 0,
                        sorted: SortedColumn::build(&(0..n).collect::<Vec<_>>(), |i| matrix[i][0]),
                    }
                } else if unconstrained && p == 2 && column_is_binary_with_both(&matrix, 0) {
                    Self::binary_split(&matrix, 0, 1)
                } else if unconstrained && p == 2 && column_is_binary_with_both(&matrix, 1) {
                    Self::binary_split(&matrix, 1, 0)
                } else {
                    let required = enumeration_size(n, class);
                    if required > u128::from(enumeration_budget) {
                        return Err(Error::EnumerationBudget {
                            required,
                            budget: enumeration_budget,
                        });
                    }
                    SolverKind::Enumerated(enumerate_candidates(stage, &matrix, class)?)
                };
                (features.clone(), kind)
            }
        };
        Ok(StageSolver {
            stage,
            features,
            matrix,
            kind,
        })
    }

    fn binary_split(matrix: &[Vec<f64>], bin_col: usize, cont_col: usize) -> SolverKind {
        let mut group_rows: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, row) in matrix.iter().enumerate() {
            group_rows[usize::from(row[bin_col] == 1.0)].push(i);
        }
        let groups = [
            SortedColumn::build(&group_rows[0], |i| matrix[i][cont_col]),
            SortedColumn::build(&group_rows[1], |i| matrix[i][cont_col]),
        ];
        SolverKind::BinarySplit {
            bin_col,
            cont_col,
            groups,
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.len()
    }

    /// Number of candidate assignments the engine scans.
    pub fn candidate_count(&self) -> u128 {
        match &self.kind {
            SolverKind::Constants => 2,
            SolverKind::Threshold { sorted, .. } => 2 * (sorted.runs.len() as u128 + 1),
            SolverKind::BinarySplit { groups, .. } => {
                2 * (groups[0].runs.len() as u128 + 1) * (groups[1].runs.len() as u128 + 1)
            }
            SolverKind::Enumerated(cands) => cands.len() as u128,
        }
    }

    /// Exact constrained argmax of `Σ_i w_i · g(H_i)`.
    pub fn argmax(&self, weights: &[f64], constraint: &mut StageConstraint) -> Result<ScoredRule> {
        match &self.kind {
            SolverKind::Enumerated(cands) => {
                let (rule, value) = argmax_weighted_rule(cands, weights, |rule, assign| {
                    constraint.admits_assignment(rule, assign)
                })?;
                let assign = self.assignment_of(&rule);
                Ok(ScoredRule {
                    rule,
                    assign,
                    value,
                })
            }
            SolverKind::Constants => {
                let all_zero = vec![0u8; self.n()];
                let all_one = vec![1u8; self.n()];
                let mut best: Option<ScoredRule> = None;
                for (value_rule, assign) in [(0u8, all_zero), (1u8, all_one)] {
                    let rule = StageRule::constant(self.stage, value_rule);
                    if !constraint.admits_assignment(&rule, &assign) {
                        continue;
                    }
                    let value: f64 = weights
                        .iter()
                        .zip(&assign)
                        .map(|(w, a)| w * f64::from(*a))
                        .sum();
                    if best.as_ref().map_or(true, |b| value > b.value) {
                        best = Some(ScoredRule {
                            rule,
                            assign,
                            value,
                        });
                    }
                }
                best.ok_or(Error::EmptyFeasibleSet { stage: self.stage })
            }
            SolverKind::Threshold { col, sorted } => {
                self.argmax_threshold(*col, sorted, weights, constraint)
            }
            SolverKind::BinarySplit {
                bin_col,
                cont_col,
                groups,
            } => self.argmax_binary_split(*bin_col, *cont_col, groups, weights, constraint),
        }
    }

    fn assignment_of(&self, rule: &StageRule) -> Vec<u8> {
        use crate::policy::RuleKind;
        match &rule.kind {
            RuleKind::Constant(v) => vec![*v; self.n()],
            RuleKind::Linear { beta, .. } => self
                .matrix
                .iter()
                .map(|row| {
                    let mut s = beta[0];
                    for (b, x) in beta[1..].iter().zip(row) {
                        s += b * x;
                    }
                    u8::from(s >= 0.0)
                })
                .collect(),
        }
    }

    /// Builds the threshold rule "treat iff orient·(v − cut) ≥ 0" in the
    /// stage's feature parameterization.
    fn threshold_rule_beta(sorted: &SortedColumn, orient: f64, run_idx: usize) -> (f64, f64) {
        let cut = cut_value(sorted, orient, run_idx);
        (-orient * cut, orient)
    }

    fn argmax_threshold(
        &self,
        col: usize,
        sorted: &SortedColumn,
        weights: &[f64],
        constraint: &mut StageConstraint,
    ) -> Result<ScoredRule> {
        let r = sorted.runs.len();
        // Run-level weight sums and constraint hits.
        let mut run_weight = vec![0.0; r];
        let mut run_has_one = vec![false; r];
        let mut run_has_zero = vec![false; r];
        for (k, &(start, end)) in sorted.runs.iter().enumerate() {
            for &i in &sorted.order[start..end] {
                run_weight[k] += weights[i];
                if constraint.must_one.map_or(false, |m| m[i]) {
                    run_has_one[k] = true;
                }
                if constraint.must_zero.map_or(false, |m| m[i]) {
                    run_has_zero[k] = true;
                }
            }
        }
        let first_one = run_has_one.iter().position(|&b| b);
        let last_one = run_has_one.iter().rposition(|&b| b);
        let first_zero = run_has_zero.iter().position(|&b| b);
        let last_zero = run_has_zero.iter().rposition(|&b| b);

        let mut best: Option<(f64, usize, f64)> = None; // (orient, run_idx, value)
        let mut consider = |orient: f64, run_idx: usize, value: f64| {
            if best.map_or(true, |(_, _, bv)| value > bv) {
                best = Some((orient, run_idx, value));
            }
        };

        // Suffix candidates (treat v ≥ cut): run_idx is the first treated run.
        let lo = last_zero.map_or(0, |k| k + 1);
        let hi = first_one.map_or(r, |k| k);
        if lo <= hi {
            let mut suffix = 0.0;
            let mut suffix_at = vec![0.0; r + 1];
            for k in (0..r).rev() {
                suffix += run_weight[k];
                suffix_at[k] = suffix;
            }
            for k in lo..=hi {
                let value = suffix_at.get(k).copied().unwrap_or(0.0);
                if let Some(pred) = &mut constraint.predicate {
                    let (b0, b1) = Self::threshold_rule_beta(sorted, 1.0, k);
                    let rule = self.linear_rule_single(col, b0, b1);
                    let assign = self.assignment_of(&rule);
                    if !pred(&rule, &assign) {
                        continue;
                    }
                }
                consider(1.0, k, value);
            }
        }

        // Prefix candidates (treat v ≤ cut): run_idx is one past the last
        // treated run.
        let lo = last_one.map_or(0, |k| k + 1);
        let hi = first_zero.map_or(r, |k| k);
        if lo <= hi {
            let mut prefix_at = vec![0.0; r + 1];
            let mut prefix = 0.0;
            for k in 0..r {
                prefix += run_weight[k];
                prefix_at[k + 1] = prefix;
            }
            for k in lo..=hi {
                let value = prefix_at[k];
                if let Some(pred) = &mut constraint.predicate {
                    let (b0, b1) = Self::threshold_rule_beta(sorted, -1.0, k);
                    let rule = self.linear_rule_single(col, b0, b1);
                    let assign = self.assignment_of(&rule);
                    if !pred(&rule, &assign) {
                        continue;
                    }
                }
                consider(-1.0, k, value);
            }
        }

        let (orient, run_idx, _) = best.ok_or(Error::EmptyFeasibleSet { stage: self.stage })?;
        let (b0, b1) = Self::threshold_rule_beta(sorted, orient, run_idx);
        let rule = self.linear_rule_single(col, b0, b1);
        let assign = self.assignment_of(&rule);
        let value = index_order_value(weights, &assign);
        Ok(ScoredRule {
            rule,
            assign,
            value,
        })
    }

    /// Linear rule with a single active column in this stage's feature list.
    fn linear_rule_single(&self, col: usize, b0: f64, b_col: f64) -> StageRule {
        let mut beta = vec![0.0; self.features.len() + 1];
        beta[0] = b0;
        beta[col + 1] = b_col;
        StageRule::linear(self.stage, self.features.clone(), beta)
    }

    fn binary_rule(
        &self,
        bin_col: usize,
        cont_col: usize,
        orient: f64,
        cut0: f64,
        cut1: f64,
    ) -> StageRule {
        // Group b scores orient·(v − cut_b): β_c = orient, β0 = −orient·cut0,
        // β_b = orient·(cut0 − cut1).
        let mut beta = vec![0.0; self.features.len() + 1];
        beta[0] = -orient * cut0;
        beta[bin_col + 1] = orient * (cut0 - cut1);
        beta[cont_col + 1] = orient;
        StageRule::linear(self.stage, self.features.clone(), beta)
    }

    fn argmax_binary_split(
        &self,
        bin_col: usize,
        cont_col: usize,
        groups: &[SortedColumn; 2],
        weights: &[f64],
        constraint: &mut StageConstraint,
    ) -> Result<ScoredRule> {
        // Per-group candidate values and feasible index ranges mirror the
        // single-threshold scan.
        struct GroupScan {
            values: Vec<f64>, // objective contribution per run index
            lo: usize,
            hi: usize, // inclusive; empty when lo > hi
        }
        let scan_group = |sorted: &SortedColumn, orient: f64| -> GroupScan {
            let r = sorted.runs.len();
            let mut run_weight = vec![0.0; r];
            let mut run_has_one = vec![false; r];
            let mut run_has_zero = vec![false; r];
            for (k, &(start, end)) in sorted.runs.iter().enumerate() {
                for &i in &sorted.order[start..end] {
                    run_weight[k] += weights[i];
                    if constraint.must_one.map_or(false, |m| m[i]) {
                        run_has_one[k] = true;
                    }
                    if constraint.must_zero.map_or(false, |m| m[i]) {
                        run_has_zero[k] = true;
                    }
                }
            }
            let first_one = run_has_one.iter().position(|&b| b);
            let last_one = run_has_one.iter().rposition(|&b| b);
            let first_zero = run_has_zero.iter().position(|&b| b);
            let last_zero = run_has_zero.iter().rposition(|&b| b);
            let mut values = vec![0.0; r + 1];
            let (lo, hi) = if orient > 0.0 {
                let mut suffix = 0.0;
                for k in (0..r).rev() {
                    suffix += run_weight[k];
                    values[k] = suffix;
                }
                (last_zero.map_or(0, |k| k + 1), first_one.map_or(r, |k| k))
            } else {
                let mut prefix = 0.0;
                for k in 0..r {
                    prefix += run_weight[k];
                    values[k + 1] = prefix;
                }
                (last_one.map_or(0, |k| k + 1), first_zero.map_or(r, |k| k))
            };
            GroupScan { values, lo, hi }
        };

        let mut best: Option<(f64, usize, usize, f64)> = None;
        for orient in [1.0, -1.0] {
            let scan0 = scan_group(&groups[0], orient);
            let scan1 = scan_group(&groups[1], orient);
            if scan0.lo > scan0.hi || scan1.lo > scan1.hi {
                continue;
            }
            if constraint.predicate.is_some() {
                // Coupled feasibility: walk the whole product grid.
                for k0 in scan0.lo..=scan0.hi {
                    for k1 in scan1.lo..=scan1.hi {
                        let rule = self.binary_rule(
                            bin_col,
                            cont_col,
                            orient,
                            cut_value(&groups[0], orient, k0),
                            cut_value(&groups[1], orient, k1),
                        );
                        let assign = self.assignment_of(&rule);
                        let pred = constraint.predicate.as_mut().expect("predicate present");
                        if !pred(&rule, &assign) {
                            continue;
                        }
                        let value = scan0.values[k0] + scan1.values[k1];
                        if best.map_or(true, |(_, _, _, bv)| value > bv) {
                            best = Some((orient, k0, k1, value));
                        }
                    }
                }
            } else {
                // Decoupled: each group independently picks its best run.
                let pick = |scan: &GroupScan| {
                    (scan.lo..=scan.hi)
                        .map(|k| (k, scan.values[k]))
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                        .expect("nonempty range")
                };
                let (k0, v0) = pick(&scan0);
                let (k1, v1) = pick(&scan1);
                let value = v0 + v1;
                if best.map_or(true, |(_, _, _, bv)| value > bv) {
                    best = Some((orient, k0, k1, value));
                }
            }
        }
        let (orient, k0, k1, _) = best.ok_or(Error::EmptyFeasibleSet { stage: self.stage })?;
        let rule = self.binary_rule(
            bin_col,
            cont_col,
            orient,
            cut_value(&groups[0], orient, k0),
            cut_value(&groups[1], orient, k1),
        );
        let assign = self.assignment_of(&rule);
        let value = index_order_value(weights, &assign);
        Ok(ScoredRule {
            rule,
            assign,
            value,
        })
    }

    /// The treat-nobody member of the class on this data, when one exists.
    pub fn zero_rule(&self) -> Option<(StageRule, Vec<u8>)> {
        match &self.kind {
            SolverKind::Constants => Some((StageRule::constant(self.stage, 0), vec![0; self.n()])),
            SolverKind::Threshold { col, sorted } => {
                let (b0, b1) = Self::threshold_rule_beta(sorted, 1.0, sorted.runs.len());
                let rule = self.linear_rule_single(*col, b0, b1);
                let assign = self.assignment_of(&rule);
                Some((rule, assign))
            }
            SolverKind::BinarySplit {
                bin_col,
                cont_col,
                groups,
            } => {
                let rule = self.binary_rule(
                    *bin_col,
                    *cont_col,
                    1.0,
                    cut_value(&groups[0], 1.0, groups[0].runs.len()),
                    cut_value(&groups[1], 1.0, groups[1].runs.len()),
                );
                let assign = self.assignment_of(&rule);
                Some((rule, assign))
            }
            SolverKind::Enumerated(cands) => cands
                .assignments
                .iter()
                .position(|a| a.iter().all(|&v| v == 0))
                .map(|idx| (cands.rules[idx].clone(), cands.assignments[idx].clone())),
        }
    }

    /// Uniformly random candidate in rank space (independent of feature
    /// values, so restarts are stable under constant outcome shifts).
    pub fn random_candidate(&self, rng: &mut ChaCha12Rng) -> ScoredRule {
        let rule = match &self.kind {
            SolverKind::Constants => StageRule::constant(self.stage, rng.gen_range(0..2u8)),
            SolverKind::Threshold { col, sorted } => {
                let orient = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let run_idx = rng.gen_range(0..=sorted.runs.len());
                let (b0, b1) = Self::threshold_rule_beta(sorted, orient, run_idx);
                self.linear_rule_single(*col, b0, b1)
            }
            SolverKind::BinarySplit {
                bin_col,
                cont_col,
                groups,
            } => {
                let orient = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                let pick = |sorted: &SortedColumn, rng: &mut ChaCha12Rng| -> f64 {
                    let run_idx = rng.gen_range(0..=sorted.runs.len());
                    cut_value(sorted, orient, run_idx)
                };
                let cut0 = pick(&groups[0], rng);
                let cut1 = pick(&groups[1], rng);
                self.binary_rule(*bin_col, *cont_col, orient, cut0, cut1)
            }
            SolverKind::Enumerated(cands) => {
                let idx = rng.gen_range(0..cands.len());
                cands.rules[idx].clone()
            }
        };
        let assign = self.assignment_of(&rule);
        let value = 0.0;
        ScoredRule {
            rule,
            assign,
            value,
        }
    }

    /// Materializes every candidate (for exhaustive product search). Order is
    /// deterministic.
    pub fn enumerate_all(&self) -> Vec<(StageRule, Vec<u8>)> {
        match &self.kind {
            SolverKind::Constants => vec![
                (StageRule::constant(self.stage, 0), vec![0; self.n()]),
                (StageRule::constant(self.stage, 1), vec![1; self.n()]),
            ],
            SolverKind::Threshold { col, sorted } => {
                let mut out = Vec::new();
                for orient in [1.0, -1.0] {
                    for run_idx in 0..=sorted.runs.len() {
                        let (b0, b1) = Self::threshold_rule_beta(sorted, orient, run_idx);
                        let rule = self.linear_rule_single(*col, b0, b1);
                        let assign = self.assignment_of(&rule);
                        out.push((rule, assign));
                    }
                }
                out
            }
            SolverKind::BinarySplit {
                bin_col,
                cont_col,
                groups,
            } => {
                let mut out = Vec::new();
                for orient in [1.0, -1.0] {
                    for k0 in 0..=groups[0].runs.len() {
                        for k1 in 0..=groups[1].runs.len() {
                            let rule = self.binary_rule(
                                *bin_col,
                                *cont_col,
                                orient,
                                cut_value(&groups[0], orient, k0),
                                cut_value(&groups[1], orient, k1),
                            );
                            let assign = self.assignment_of(&rule);
                            out.push((rule, assign));
                        }
                    }
                }
                out
            }
            SolverKind::Enumerated(cands) => cands
                .rules
                .iter()
                .cloned()
                .zip(cands.assignments.iter().cloned())
                .collect(),
        }
    }
}
