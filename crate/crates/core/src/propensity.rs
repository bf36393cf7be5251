//! Per-stage treatment assignment probabilities `e_t(d_t, h_t)`.
//!
//! Experimental designs supply known propensities (a constant per stage, or a
//! lookup table over discrete history values). Observational data uses
//! stage-wise logistic regression on selected history features. All returned
//! probabilities are clipped into `[κ_min, 1−κ_min]` so inverse-propensity
//! weights stay bounded.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::{history, HistoryVector, PanelDataset};
use crate::error::{Error, Result};
use crate::textio::LineReader;

/// Probability model for one stage's treatment assignment.
#[derive(Debug, Clone, PartialEq)]
pub enum StageModel {
    /// P(D_t = 1 | h) is the same for every history.
    KnownConstant { p1: f64 },
    /// P(D_t = 1 | h) looked up from the selected (discrete-valued) history
    /// coordinates; unseen keys fall back to `default`.
    KnownTable {
        selector: Vec<usize>,
        entries: HashMap<Vec<u64>, f64>,
        default: f64,
    },
    /// P(D_t = 1 | h) = sigmoid((1, h[selector])·β).
    Logistic {
        selector: Vec<usize>,
        beta: Vec<f64>,
    },
}

/// Assignment probabilities for all stages, with a global clip floor.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel {
    pub stages: Vec<StageModel>,
    /// κ_min: probabilities are clamped into [κ_min, 1−κ_min].
    pub clip_floor: f64,
}

/// Default overlap floor.
pub const DEFAULT_CLIP_FLOOR: f64 = 0.01;

fn table_key(selector: &[usize], values: &[f64]) -> Vec<u64> {
    selector
        .iter()
        .map(|&i| {
            let v = values[i];
            // Normalize -0.0 so equal values share a key.
            (if v == 0.0 { 0.0f64 } else { v }).to_bits()
        })
        .collect()
}

impl PropensityModel {
    /// Known design with the same constant assignment probability everywhere.
    pub fn known_constant(horizon: usize, p1: f64) -> Result<Self> {
        Self::from_stage_p1(vec![p1; horizon])
    }

    /// Known design with one constant probability per stage.
    pub fn from_stage_p1(p1: Vec<f64>) -> Result<Self> {
        let stages = p1
            .into_iter()
            .map(|p| StageModel::KnownConstant { p1: p })
            .collect();
        Self::new(stages, DEFAULT_CLIP_FLOOR)
    }

    /// Builds and validates a model.
    pub fn new(stages: Vec<StageModel>, clip_floor: f64) -> Result<Self> {
        if !(0.0 < clip_floor && clip_floor < 0.5) {
            return Err(Error::InvalidPropensity {
                message: format!("clip floor must lie in (0, 0.5), got {clip_floor}"),
            });
        }
        for (t, stage) in stages.iter().enumerate() {
            match stage {
                StageModel::KnownConstant { p1 } => {
                    if !(0.0 < *p1 && *p1 < 1.0) {
                        return Err(Error::InvalidPropensity {
                            message: format!(
                                "stage {}: known probability must lie strictly in (0,1), got {p1}",
                                t + 1
                            ),
                        });
                    }
                }
                StageModel::KnownTable {
                    selector,
                    entries,
                    default,
                } => {
                    for p in entries.values().chain(std::iter::once(default)) {
                        if !(0.0 < *p && *p < 1.0) {
                            return Err(Error::InvalidPropensity {
                                message: format!(
                                    "stage {}: table probabilities must lie strictly in (0,1)",
                                    t + 1
                                ),
                            });
                        }
                    }
                    for key in entries.keys() {
                        if key.len() != selector.len() {
                            return Err(Error::InvalidPropensity {
                                message: format!(
                                    "stage {}: table key length {} does not match selector length {}",
                                    t + 1,
                                    key.len(),
                                    selector.len()
                                ),
                            });
                        }
                    }
                }
                StageModel::Logistic { selector, beta } => {
                    if beta.len() != selector.len() + 1 {
                        return Err(Error::InvalidPropensity {
                            message: format!(
                                "stage {}: {} coefficients for {} selected features",
                                t + 1,
                                beta.len(),
                                selector.len()
                            ),
                        });
                    }
                }
            }
        }
        Ok(PropensityModel { stages, clip_floor })
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    fn clip(&self, p: f64) -> f64 {
        p.clamp(self.clip_floor, 1.0 - self.clip_floor)
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// Clipped assignment probability `P(D_t = d | h)`.
pub fn propensity_at(model: &PropensityModel, t: usize, d: u8, h: &HistoryVector) -> Result<f64> {
    if t == 0 || t > model.stages.len() {
        return Err(Error::StageOutOfRange {
            stage: t,
            horizon: model.stages.len(),
        });
    }
    if h.stage != t {
        return Err(Error::StageOutOfRange {
            stage: h.stage,
            horizon: t,
        });
    }
    let stage = &model.stages[t - 1];
    let check_selector = |selector: &[usize]| -> Result<()> {
        if let Some(&bad) = selector.iter().find(|&&i| i >= h.values.len()) {
            return Err(Error::DimensionMismatch {
                what: format!("stage {t} propensity selector index {bad}"),
                expected: h.values.len(),
                got: bad + 1,
            });
        }
        Ok(())
    };
    let p1 = match stage {
        StageModel::KnownConstant { p1 } => *p1,
        StageModel::KnownTable {
            selector,
            entries,
            default,
        } => {
            check_selector(selector)?;
            *entries
                .get(&table_key(selector, &h.values))
                .unwrap_or(default)
        }
        StageModel::Logistic { selector, beta } => {
            check_selector(selector)?;
            let mut s = beta[0];
            for (b, &i) in beta[1..].iter().zip(selector) {
                s += b * h.values[i];
            }
            sigmoid(s)
        }
    };
    Ok(model.clip(if d == 1 { p1 } else { 1.0 - p1 }))
}

// ── Logistic estimation ──────────────────────────────────────────────────────

/// Result of a stage-wise logistic fit.
#[derive(Debug, Clone)]
pub struct LogisticStageFit {
    pub stage: usize,
    pub selector: Vec<usize>,
    /// (intercept, slopes over the selected features).
    pub beta: Vec<f64>,
    /// Average log-likelihood after each accepted Newton step, starting with
    /// the value at β = 0. Non-decreasing by construction.
    pub loglik_path: Vec<f64>,
    pub iterations: usize,
}

impl LogisticStageFit {
    pub fn into_stage_model(self) -> StageModel {
        StageModel::Logistic {
            selector: self.selector,
            beta: self.beta,
        }
    }
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_GRAD_TOL: f64 = 1e-8;
const SEPARATION_NORM: f64 = 250.0;

fn mean_loglik(x: &DMatrix<f64>, d: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let scores = x * beta;
    let n = x.nrows() as f64;
    scores
        .iter()
        .zip(d.iter())
        .map(|(&s, &di)| di * s - (s.max(0.0) + (-s.abs()).exp().ln_1p()))
        .sum::<f64>()
        / n
}

/// Maximum-likelihood logistic regression of `D_t` on `(1, h_t[selector])`.
///
/// Damped Newton iterations with step halving; converged when the mean
/// gradient's max-norm drops below 1e−8. Diverging coefficients signal
/// perfect separation and error out rather than returning a degenerate fit.
pub fn fit_logistic_stage(
    ds: &PanelDataset,
    t: usize,
    selector: &[usize],
) -> Result<LogisticStageFit> {
    ds.check_stage(t)?;
    if ds.trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hlen = ds.history_len(t)?;
    if let Some(&bad) = selector.iter().find(|&&i| i >= hlen) {
        return Err(Error::DimensionMismatch {
            what: format!("stage {t} propensity selector index {bad}"),
            expected: hlen,
            got: bad + 1,
        });
    }

    let n = ds.n();
    let treated: usize = ds
        .trajectories
        .iter()
        .map(|tr| usize::from(tr.treatments[t - 1]))
        .sum();
    if treated == 0 || treated == n {
        return Err(Error::SingleArm {
            stage: t,
            arm: u8::from(treated == n),
        });
    }

    let p = selector.len() + 1;
    let mut x = DMatrix::zeros(n, p);
    let mut d = DVector::zeros(n);
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let h = history(traj, t);
        x[(i, 0)] = 1.0;
        for (j, &idx) in selector.iter().enumerate() {
            x[(i, j + 1)] = h.values[idx];
        }
        d[i] = f64::from(traj.treatments[t - 1]);
    }

    let mut beta = DVector::zeros(p);
    let mut ll = mean_loglik(&x, &d, &beta);
    let mut loglik_path = vec![ll];
    for iter in 1..=NEWTON_MAX_ITER {
        let scores = &x * &beta;
        let probs = scores.map(sigmoid);
        let resid = &d - &probs;
        let grad = x.transpose() * &resid / n as f64;
        if grad.amax() < NEWTON_GRAD_TOL {
            return Ok(LogisticStageFit {
                stage: t,
                selector: selector.to_vec(),
                beta: beta.iter().copied().collect(),
                loglik_path,
                iterations: iter - 1,
            });
        }
        let w = probs.map(|pi| pi * (1.0 - pi));
        let mut xtwx = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = x.row(i);
            for a in 0..p {
                for b in a..p {
                    xtwx[(a, b)] += w[i] * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        xtwx /= n as f64;
        let chol = Cholesky::new(xtwx).ok_or_else(|| {
            if beta.amax() > 10.0 {
                Error::PerfectSeparation {
                    stage: t,
                    norm: beta.amax(),
                }
            } else {
                Error::RankDeficient {
                    what: format!("stage {t} logistic design"),
                }
            }
        })?;
        let direction = chol.solve(&grad);

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &direction * step;
            let cand_ll = mean_loglik(&x, &d, &candidate);
            if cand_ll >= ll {
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent direction left: either we're at the optimum up to
            // floating point, or the likelihood is unbounded (separation).
            if grad.amax() < 1e-6 {
                return Ok(LogisticStageFit {
                    stage: t,
                    selector: selector.to_vec(),
                    beta: beta.iter().copied().collect(),
                    loglik_path,
                    iterations: iter,
                });
            }
            return Err(Error::LogisticNoConverge {
                stage: t,
                iterations: iter,
            });
        }
        loglik_path.push(ll);
        if beta.amax() > SEPARATION_NORM {
            return Err(Error::PerfectSeparation {
                stage: t,
                norm: beta.amax(),
            });
        }
    }
    Err(Error::LogisticNoConverge {
        stage: t,
        iterations: NEWTON_MAX_ITER,
    })
}

/// Fits a logistic stage model for every stage with per-stage selectors.
pub fn fit_logistic_model(
    ds: &PanelDataset,
    selectors: &[Vec<usize>],
    clip_floor: f64,
) -> Result<PropensityModel> {
    if selectors.len() != ds.horizon {
        return Err(Error::DimensionMismatch {
            what: "propensity selectors".into(),
            expected: ds.horizon,
            got: selectors.len(),
        });
    }
    let stages = (1..=ds.horizon)
        .map(|t| Ok(fit_logistic_stage(ds, t, &selectors[t - 1])?.into_stage_model()))
        .collect::<Result<_>>()?;
    PropensityModel::new(stages, clip_floor)
}

// ── Text serialization ───────────────────────────────────────────────────────

/// Renders a propensity model in the key-value text format shared with DTRs.
pub fn propensity_to_text(model: &PropensityModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format propensity-v1");
    let _ = writeln!(out, "horizon {}", model.stages.len());
    let _ = writeln!(out, "clip {}", model.clip_floor);
    for (t, stage) in model.stages.iter().enumerate() {
        let _ = writeln!(out, "stage {}", t + 1);
        match stage {
            StageModel::KnownConstant { p1 } => {
                let _ = writeln!(out, "kind known-constant");
                let _ = writeln!(out, "p1 {p1}");
            }
            StageModel::KnownTable {
                selector,
                entries,
                default,
            } => {
                let _ = writeln!(out, "kind known-table");
                let _ = write!(out, "selector");
                for i in selector {
                    let _ = write!(out, " {i}");
                }
                let _ = writeln!(out);
                let _ = writeln!(out, "default {default}");
                let mut rows: Vec<(&Vec<u64>, &f64)> = entries.iter().collect();
                rows.sort_by(|a, b| a.0.cmp(b.0));
                for (key, p) in rows {
                    let _ = write!(out, "entry");
                    for bits in key {
                        let _ = write!(out, " {}", f64::from_bits(*bits));
                    }
                    let _ = writeln!(out, " {p}");
                }
            }
            StageModel::Logistic { selector, beta } => {
                let _ = writeln!(out, "kind logistic");
                let _ = write!(out, "selector");
                for i in selector {
                    let _ = write!(out, " {i}");
                }
                let _ = writeln!(out);
                let _ = write!(out, "beta");
                for b in beta {
                    let _ = write!(out, " {b}");
                }
                let _ = writeln!(out);
            }
        }
    }
    out
}

fn rule_err(line: usize, message: impl Into<String>) -> Error {
    Error::RuleFile {
        line,
        message: message.into(),
    }
}

fn parse_usizes(toks: &[&str], line: usize) -> Result<Vec<usize>> {
    toks.iter()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| rule_err(line, format!("`{t}` is not an index")))
        })
        .collect()
}

fn parse_floats(toks: &[&str], line: usize) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| rule_err(line, format!("`{t}` is not a number")))
        })
        .collect()
}

fn expect_kv<'a>(
    rd: &mut LineReader<'a>,
    key: &str,
    prev_line: usize,
) -> Result<(usize, Vec<&'a str>)> {
    let (ln, toks) = rd
        .next()
        .ok_or_else(|| rule_err(prev_line, format!("missing `{key}`")))?;
    if toks[0] != key {
        return Err(rule_err(
            ln,
            format!("expected `{key} ..`, found `{}`", toks[0]),
        ));
    }
    Ok((ln, toks))
}

/// Parses the propensity text format.
pub fn propensity_from_text(text: &str) -> Result<PropensityModel> {
    let mut rd = LineReader::new(text);
    let (ln, toks) = rd.next().ok_or_else(|| rule_err(0, "empty file"))?;
    if toks != ["format", "propensity-v1"] {
        return Err(rule_err(ln, "expected `format propensity-v1`"));
    }
    let (ln, toks) = expect_kv(&mut rd, "horizon", ln)?;
    let horizon: usize = toks
        .get(1)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| rule_err(ln, "horizon must be a positive integer"))?;
    let (ln, toks) = expect_kv(&mut rd, "clip", ln)?;
    let clip: f64 = toks
        .get(1)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| rule_err(ln, "clip must be a number"))?;

    let mut stages = Vec::with_capacity(horizon);
    let mut prev = ln;
    for t in 1..=horizon {
        let (ln, toks) = expect_kv(&mut rd, "stage", prev)?;
        if toks.get(1) != Some(&t.to_string().as_str()) {
            return Err(rule_err(ln, format!("expected `stage {t}`")));
        }
        let (ln, toks) = expect_kv(&mut rd, "kind", ln)?;
        let stage = match toks.get(1).copied() {
            Some("known-constant") => {
                let (ln, toks) = expect_kv(&mut rd, "p1", ln)?;
                let p1 = parse_floats(&toks[1..], ln)?;
                prev = ln;
                StageModel::KnownConstant {
                    p1: *p1.first().ok_or_else(|| rule_err(ln, "missing value"))?,
                }
            }
            Some("known-table") => {
                let (ln, toks) = expect_kv(&mut rd, "selector", ln)?;
                let selector = parse_usizes(&toks[1..], ln)?;
                let (ln, toks) = expect_kv(&mut rd, "default", ln)?;
                let default = *parse_floats(&toks[1..], ln)?
                    .first()
                    .ok_or_else(|| rule_err(ln, "missing value"))?;
                let mut entries = HashMap::new();
                prev = ln;
                // Entry lines are optional and run until the next `stage`.
                while matches!(rd.peek(), Some((_, toks)) if toks[0] == "entry") {
                    let (ln, toks) = rd.next().expect("peeked line");
                    let vals = parse_floats(&toks[1..], ln)?;
                    if vals.len() != selector.len() + 1 {
                        return Err(rule_err(
                            ln,
                            format!(
                                "entry needs {} key values plus a probability",
                                selector.len()
                            ),
                        ));
                    }
                    let (key, p) = vals.split_at(selector.len());
                    entries.insert(
                        key.iter()
                            .map(|v| (if *v == 0.0 { 0.0f64 } else { *v }).to_bits())
                            .collect(),
                        p[0],
                    );
                    prev = ln;
                }
                StageModel::KnownTable {
                    selector,
                    entries,
                    default,
                }
            }
            Some("logistic") => {
                let (ln, toks) = expect_kv(&mut rd, "selector", ln)?;
                let selector = parse_usizes(&toks[1..], ln)?;
                let (ln, toks) = expect_kv(&mut rd, "beta", ln)?;
                let beta = parse_floats(&toks[1..], ln)?;
                prev = ln;
                StageModel::Logistic { selector, beta }
            }
            other => {
                return Err(rule_err(
                    ln,
                    format!("unknown propensity kind `{}`", other.unwrap_or("")),
                ))
            }
        };
        stages.push(stage);
    }
    if let Some((ln, _)) = rd.next() {
        return Err(rule_err(ln, "trailing content after last stage"));
    }
    PropensityModel::new(stages, clip)
}

/// Writes a propensity model to a file.
pub fn write_propensity(model: &PropensityModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, propensity_to_text(model))?;
    Ok(())
}

/// Loads a propensity model from a text-format file.
pub fn load_propensity(path: impl AsRef<Path>) -> Result<PropensityModel> {
    propensity_from_text(&std::fs::read_to_string(path)?)
}
