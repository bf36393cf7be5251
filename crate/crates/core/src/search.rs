//! Exact finite search over policy-class candidates.
//!
//! Estimation reduces each stage step to: maximize `Σ_i w_i · g(H_i)` over a
//! policy class. For constant and linear-threshold classes on a finite sample
//! this is a finite problem: the class induces finitely many distinct
//! assignments (dichotomies) of the `n` observations.
//!
//! [`enumerate_candidates`] materializes one representative rule per
//! achievable dichotomy by solving for hyperplanes through every subset of
//! sample points (at every sub-dimension, so sign-constrained classes whose
//! optima lie on a sign-cone boundary are still covered), emitting both
//! orientations and a ±ε boundary perturbation, filtering by sign
//! constraints, and deduplicating by the induced assignment vector.
//! [`argmax_weighted_rule`] then scans candidates with a feasibility
//! predicate and deterministic min-index tie-breaking.
//!
//! Faster closed-form argmax paths for the common low-dimensional classes
//! live in [`crate::search::solvers`]; they agree exactly with enumeration
//! and are what the estimators use on large samples.

use std::collections::HashMap;

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::policy::{SignConstraint, StageClassSpec, StageRule};

pub(crate) mod solvers;

/// How a candidate set was generated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateProvenance {
    Constants,
    HyperplaneEnumeration {
        dimension: usize,
        point_count: usize,
    },
}

/// Finite ordered candidate rules for one stage, with the assignment vector
/// each induces on the dataset the enumeration was built from.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub stage: usize,
    pub rules: Vec<StageRule>,
    /// `assignments[c][i]` = treatment the c-th candidate assigns to row i.
    pub assignments: Vec<Vec<u8>>,
    pub provenance: CandidateProvenance,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

fn score_assignment(beta: &[f64], rows: &[Vec<f64>]) -> Vec<u8> {
    rows.iter()
        .map(|row| {
            let mut s = beta[0];
            for (b, x) in beta[1..].iter().zip(row) {
                s += b * x;
            }
            u8::from(s >= 0.0)
        })
        .collect()
}

fn signs_admit(beta: &[f64], signs: &[SignConstraint]) -> bool {
    beta.iter().zip(signs).all(|(b, s)| s.admits(*b))
}

/// Null vector of the `q × (q+1)` system `[1, x_i] · v = 0`, or `None` when
/// the point subset is degenerate (nullity above one).
fn hyperplane_through(points: &[&[f64]]) -> Option<Vec<f64>> {
    let q = points.len();
    let cols = q + 1;
    let mut m: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let mut row = Vec::with_capacity(cols);
            row.push(1.0);
            row.extend_from_slice(p);
            row
        })
        .collect();

    let mut pivot_col = vec![usize::MAX; q];
    let mut col_is_pivot = vec![false; cols];
    let mut rank = 0;
    for col in 0..cols {
        let (best_row, best_val) = match (rank..q)
            .map(|r| (r, m[r][col].abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
        {
            Some(v) => v,
            None => break,
        };
        if best_val <= 1e-12 {
            continue;
        }
        m.swap(rank, best_row);
        let pivot = m[rank][col];
        for r in 0..q {
            if r != rank {
                let factor = m[r][col] / pivot;
                for c in col..cols {
                    m[r][c] -= factor * m[rank][c];
                }
            }
        }
        pivot_col[rank] = col;
        col_is_pivot[col] = true;
        rank += 1;
    }
    if rank < q {
        return None;
    }
    let free = (0..cols).find(|c| !col_is_pivot[*c])?;
    let mut v = vec![0.0; cols];
    v[free] = 1.0;
    for r in 0..q {
        let pc = pivot_col[r];
        v[pc] = -m[r][free] / m[r][pc];
    }
    // Normalize the representative so emitted coefficients are scale-stable.
    let max = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if max > 0.0 {
        for x in &mut v {
            *x /= max;
        }
    }
    Some(v)
}

/// Enumerates candidate rules for one stage of a policy class, evaluated on
/// the stage feature matrix `features` (n rows, one entry per selected
/// feature).
///
/// Linear classes enumerate hyperplanes through every point subset at every
/// coordinate sub-dimension, both orientations, with intercept perturbations
/// `±ε_tie` (`ε_tie` = 1e−9 × the largest absolute feature value) so both
/// sides of each boundary are realized. Candidates violating a sign
/// constraint are dropped; the rest are deduplicated by their induced
/// assignment vector, keeping the earliest. The two constant rules head the
/// list, so all-negative weights select "never treat" by the min-index tie
/// rule.
pub fn enumerate_candidates(
    stage: usize,
    features: &[Vec<f64>],
    class: &StageClassSpec,
) -> Result<CandidateSet> {
    let n = features.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (class_features, signs) = match class {
        StageClassSpec::Constants => {
            return Ok(CandidateSet {
                stage,
                rules: vec![StageRule::constant(stage, 0), StageRule::constant(stage, 1)],
                assignments: vec![vec![0; n], vec![1; n]],
                provenance: CandidateProvenance::Constants,
            });
        }
        StageClassSpec::Linear { features, signs } => (features, signs),
    };
    let p = class_features.len();
    if p == 0 {
        return Err(Error::InvalidPolicySpec {
            message: format!("stage {stage}: linear class with no features"),
        });
    }
    for row in features {
        if row.len() != p {
            return Err(Error::DimensionMismatch {
                what: format!("stage {stage} feature row"),
                expected: p,
                got: row.len(),
            });
        }
    }

    let feature_scale = features
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |a, b| a.max(b.abs()));
    let eps = 1e-9
        * if feature_scale > 0.0 {
            feature_scale
        } else {
            1.0
        };

    let mut rules = Vec::new();
    let mut assignments = Vec::new();
    let mut seen: HashMap<Vec<u8>, ()> = HashMap::new();
    let mut push = |rule: StageRule, assign: Vec<u8>| {
        if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(assign.clone()) {
            e.insert(());
            rules.push(rule);
            assignments.push(assign);
        }
    };

    // Constant rules first: intercept-only directions ∓1.
    if signs[0] != SignConstraint::NonNegative {
        push(StageRule::constant(stage, 0), vec![0; n]);
    }
    if signs[0] != SignConstraint::NonPositive {
        push(StageRule::constant(stage, 1), vec![1; n]);
    }

    // Hyperplanes through q points using q coordinates, full dimension first.
    for q in (1..=p).rev() {
        for coord_subset in (0..p).combinations(q) {
            for point_subset in (0..n).combinations(q) {
                let projected: Vec<Vec<f64>> = point_subset
                    .iter()
                    .map(|&i| coord_subset.iter().map(|&c| features[i][c]).collect())
                    .collect();
                let refs: Vec<&[f64]> = projected.iter().map(Vec::as_slice).collect();
                let Some(v) = hyperplane_through(&refs) else {
                    continue;
                };
                // Embed the projected direction back into the full space.
                let mut base = vec![0.0; p + 1];
                base[0] = v[0];
                for (slot, &c) in coord_subset.iter().enumerate() {
                    base[c + 1] = v[slot + 1];
                }
                for orient in [1.0, -1.0] {
                    let oriented: Vec<f64> = base.iter().map(|b| b * orient).collect();
                    if !signs_admit(&oriented, signs) {
                        continue;
                    }
                    for offset in [eps, -eps] {
                        let mut beta = oriented.clone();
                        beta[0] += offset;
                        if !signs[0].admits(beta[0]) {
                            continue;
                        }
                        let assign = score_assignment(&beta, features);
                        push(
                            StageRule::linear(stage, class_features.clone(), beta),
                            assign,
                        );
                    }
                }
            }
        }
    }

    Ok(CandidateSet {
        stage,
        rules,
        assignments,
        provenance: CandidateProvenance::HyperplaneEnumeration {
            dimension: p,
            point_count: n,
        },
    })
}

/// Number of raw candidates enumeration would generate before deduplication,
/// used for budget checks without materializing anything.
pub fn enumeration_size(n: usize, class: &StageClassSpec) -> u128 {
    match class {
        StageClassSpec::Constants => 2,
        StageClassSpec::Linear { features, .. } => {
            let p = features.len();
            let mut total: u128 = 2;
            for q in 1..=p {
                let coord_subsets = binomial(p as u128, q as u128);
                let point_subsets = binomial(n as u128, q as u128);
                total = total.saturating_add(
                    coord_subsets
                        .saturating_mul(point_subsets)
                        .saturating_mul(4),
                );
            }
            total
        }
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let mut result: u128 = 1;
    for i in 0..k {
        result = result.saturating_mul(n - i) / (i + 1);
    }
    result
}

/// Maximizes `Σ_i w_i · rule(H_i)` over the candidate set, restricted to
/// candidates accepted by `feasible` (which receives the rule and its
/// assignment vector). Ties keep the lowest candidate index.
pub fn argmax_weighted_rule(
    cands: &CandidateSet,
    weights: &[f64],
    mut feasible: impl FnMut(&StageRule, &[u8]) -> bool,
) -> Result<(StageRule, f64)> {
    let n = weights.len();
    let mut best: Option<(usize, f64)> = None;
    for (idx, (rule, assign)) in cands.rules.iter().zip(&cands.assignments).enumerate() {
        if assign.len() != n {
            return Err(Error::DimensionMismatch {
                what: "candidate assignment".into(),
                expected: n,
                got: assign.len(),
            });
        }
        if !feasible(rule, assign) {
            continue;
        }
        let value: f64 = weights
            .iter()
            .zip(assign)
            .map(|(w, a)| w * f64::from(*a))
            .sum();
        if best.map_or(true, |(_, bv)| value > bv) {
            best = Some((idx, value));
        }
    }
    match best {
        Some((idx, value)) => Ok((cands.rules[idx].clone(), value)),
        None => Err(Error::EmptyFeasibleSet { stage: cands.stage }),
    }
}
