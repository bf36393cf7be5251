//! Treatment rules, dynamic regimes, and policy classes.
//!
//! A stage rule maps the canonical history vector to a binary treatment.
//! Linear rules threshold an eligibility score `(1, h[selector])·β` at zero;
//! ties assign treatment. A dynamic treatment regime (DTR) is one rule per
//! stage. Policy classes describe the rule sets searched during estimation:
//! constants or linear rules over selected history coordinates, optionally
//! with coefficient sign constraints, plus an intertemporal restriction
//! linking stages (one-shot, start-time, stop-time).

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{history_with_offsets, HistoryVector, PanelDataset, Trajectory};
use crate::error::{Error, Result};
use crate::textio::LineReader;

// ── Features ─────────────────────────────────────────────────────────────────

/// A feature extracted from the canonical history vector: either one
/// coordinate or a product of two (interactions such as `d1·y1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureRef {
    Single(usize),
    Product(usize, usize),
}

impl FeatureRef {
    /// Largest history index referenced.
    pub fn max_index(self) -> usize {
        match self {
            FeatureRef::Single(i) => i,
            FeatureRef::Product(i, j) => i.max(j),
        }
    }

    /// Evaluates the feature on a history value slice.
    pub fn eval(self, values: &[f64]) -> f64 {
        match self {
            FeatureRef::Single(i) => values[i],
            FeatureRef::Product(i, j) => values[i] * values[j],
        }
    }
}

impl std::fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureRef::Single(i) => write!(f, "{i}"),
            FeatureRef::Product(i, j) => write!(f, "{i}*{j}"),
        }
    }
}

fn parse_feature(tok: &str) -> Option<FeatureRef> {
    if let Some((a, b)) = tok.split_once('*') {
        Some(FeatureRef::Product(a.parse().ok()?, b.parse().ok()?))
    } else {
        Some(FeatureRef::Single(tok.parse().ok()?))
    }
}

/// Evaluates a feature list into a dense row.
pub fn feature_row(features: &[FeatureRef], values: &[f64]) -> Vec<f64> {
    features.iter().map(|f| f.eval(values)).collect()
}

// ── Rules ────────────────────────────────────────────────────────────────────

/// Functional form of a stage rule.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleKind {
    /// Assigns the same treatment to every history.
    Constant(u8),
    /// Thresholds the eligibility score `(1, features(h))·β` at zero.
    /// `beta[0]` is the intercept; `beta[j+1]` multiplies `features[j]`.
    Linear {
        features: Vec<FeatureRef>,
        beta: Vec<f64>,
    },
}

/// A single-stage treatment rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRule {
    /// Stage this rule decides (1-based).
    pub stage: usize,
    pub kind: RuleKind,
}

impl StageRule {
    pub fn constant(stage: usize, value: u8) -> Self {
        StageRule {
            stage,
            kind: RuleKind::Constant(value),
        }
    }

    pub fn linear(stage: usize, features: Vec<FeatureRef>, beta: Vec<f64>) -> Self {
        StageRule {
            stage,
            kind: RuleKind::Linear { features, beta },
        }
    }

    /// Eligibility score; constants return ±∞ so the sign convention is
    /// uniform.
    pub fn score(&self, h: &HistoryVector) -> Result<f64> {
        self.validate_against(h)?;
        match &self.kind {
            RuleKind::Constant(v) => Ok(if *v == 1 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            }),
            RuleKind::Linear { features, beta } => {
                let mut s = beta[0];
                for (f, b) in features.iter().zip(&beta[1..]) {
                    s += b * f.eval(&h.values);
                }
                Ok(s)
            }
        }
    }

    fn validate_against(&self, h: &HistoryVector) -> Result<()> {
        if self.stage != h.stage {
            return Err(Error::StageOutOfRange {
                stage: h.stage,
                horizon: self.stage,
            });
        }
        if let RuleKind::Linear { features, beta } = &self.kind {
            if beta.len() != features.len() + 1 {
                return Err(Error::DimensionMismatch {
                    what: format!("stage {} rule coefficients", self.stage),
                    expected: features.len() + 1,
                    got: beta.len(),
                });
            }
            for f in features {
                if f.max_index() >= h.values.len() {
                    return Err(Error::DimensionMismatch {
                        what: format!("stage {} feature selector", self.stage),
                        expected: h.values.len(),
                        got: f.max_index() + 1,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Applies a stage rule to a history. Linear rules treat exactly when the
/// eligibility score is non-negative; a score of exactly zero assigns 1.
pub fn apply_rule(rule: &StageRule, h: &HistoryVector) -> Result<u8> {
    match &rule.kind {
        RuleKind::Constant(v) => {
            rule.validate_against(h)?;
            Ok(*v)
        }
        RuleKind::Linear { .. } => Ok(if rule.score(h)? >= 0.0 { 1 } else { 0 }),
    }
}

// ── Regimes ──────────────────────────────────────────────────────────────────

/// A dynamic treatment regime: one rule per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Dtr {
    /// Rules for stages 1..=T, in order.
    pub rules: Vec<StageRule>,
    /// Training outcome means for rules fitted on demeaned data. When a DTR
    /// carrying offsets is deployed on raw outcomes, the outcome block of
    /// each history is shifted by these means before scoring.
    pub outcome_offsets: Option<Vec<f64>>,
}

impl Dtr {
    pub fn new(rules: Vec<StageRule>) -> Self {
        Dtr {
            rules,
            outcome_offsets: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.rules.len()
    }

    /// Offsets to apply when scoring against `ds`: none when the dataset is
    /// already demeaned (the rule and the data share the centered scale).
    pub fn offsets_for(&self, ds: &PanelDataset) -> Option<&[f64]> {
        if ds.demeaned {
            None
        } else {
            self.outcome_offsets.as_deref()
        }
    }

    /// The regime's assignment at stage `t` of a trajectory, with optional
    /// outcome offsets applied to the history.
    pub fn assign(&self, traj: &Trajectory, t: usize, offsets: Option<&[f64]>) -> Result<u8> {
        let rule = self.rules.get(t - 1).ok_or(Error::StageOutOfRange {
            stage: t,
            horizon: self.rules.len(),
        })?;
        apply_rule(rule, &history_with_offsets(traj, t, offsets))
    }
}

/// Cumulative agreement indicator: 1 iff the regime's assignment equals the
/// observed treatment at every stage `s ≤ t`.
///
/// Histories are taken as stored on the trajectory; evaluation entry points
/// that mix demeaned-fitted rules with raw data apply the regime's outcome
/// offsets before calling into rule scoring.
pub fn match_indicator(dtr: &Dtr, traj: &Trajectory, t: usize) -> Result<bool> {
    match_indicator_with_offsets(dtr, traj, t, None)
}

/// [`match_indicator`] with explicit outcome offsets for raw-data deployment.
pub fn match_indicator_with_offsets(
    dtr: &Dtr,
    traj: &Trajectory,
    t: usize,
    offsets: Option<&[f64]>,
) -> Result<bool> {
    for s in 1..=t {
        if dtr.assign(traj, s, offsets)? != traj.treatments[s - 1] {
            return Ok(false);
        }
    }
    Ok(true)
}

// ── Intertemporal restrictions ───────────────────────────────────────────────

/// Cross-stage restriction on a regime's assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntertemporalKind {
    /// No restriction.
    None,
    /// Treat at most once over the horizon: `Σ_{s<t} d_s + g_t ≤ 1`.
    OneShot,
    /// Once started, never stop: `d_s ≤ g_t` for all `s < t`.
    StartTime,
    /// Once stopped, never restart: `d_s ≥ g_t` for all `s < t`.
    StopTime,
}

/// Outcome of an intertemporal feasibility check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntertemporalCheck {
    Feasible,
    /// First stage at which the regime's assignment violates the restriction
    /// given the trajectory's realized prior treatments.
    Violation {
        stage: usize,
    },
}

/// Checks a regime against one trajectory's realized treatment path.
///
/// Prior treatments are the observed `d_s`; the stage-`t` assignment is the
/// regime's output on the realized history. At deployment the prior
/// treatments would instead be the regime's own outputs; callers evaluating
/// deployment feasibility should pass a trajectory whose treatments are the
/// regime's assignments.
pub fn check_intertemporal(
    dtr: &Dtr,
    traj: &Trajectory,
    kind: IntertemporalKind,
) -> Result<IntertemporalCheck> {
    if kind == IntertemporalKind::None {
        return Ok(IntertemporalCheck::Feasible);
    }
    for t in 1..=dtr.horizon() {
        let g = dtr.assign(traj, t, None)?;
        let prior = &traj.treatments[..t - 1];
        let ok = match kind {
            IntertemporalKind::None => true,
            IntertemporalKind::OneShot => {
                prior.iter().map(|&d| u32::from(d)).sum::<u32>() + u32::from(g) <= 1
            }
            IntertemporalKind::StartTime => !(prior.iter().any(|&d| d == 1) && g == 0),
            IntertemporalKind::StopTime => !(prior.iter().any(|&d| d == 0) && g == 1),
        };
        if !ok {
            return Ok(IntertemporalCheck::Violation { stage: t });
        }
    }
    Ok(IntertemporalCheck::Feasible)
}

// ── Policy classes ───────────────────────────────────────────────────────────

/// Sign restriction on one coefficient of a linear rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConstraint {
    Free,
    NonNegative,
    NonPositive,
}

impl SignConstraint {
    pub fn admits(self, v: f64) -> bool {
        match self {
            SignConstraint::Free => true,
            SignConstraint::NonNegative => v >= 0.0,
            SignConstraint::NonPositive => v <= 0.0,
        }
    }
}

/// Rule set searched at one stage.
#[derive(Debug, Clone, PartialEq)]
pub enum StageClassSpec {
    /// The two constant rules {0, 1}.
    Constants,
    /// Linear eligibility-score rules over the selected features.
    /// `signs[0]` constrains the intercept, `signs[j+1]` the coefficient on
    /// `features[j]`.
    Linear {
        features: Vec<FeatureRef>,
        signs: Vec<SignConstraint>,
    },
}

impl StageClassSpec {
    /// Linear class with unconstrained coefficients.
    pub fn linear(features: Vec<FeatureRef>) -> Self {
        let signs = vec![SignConstraint::Free; features.len() + 1];
        StageClassSpec::Linear { features, signs }
    }

    pub fn has_sign_constraints(&self) -> bool {
        match self {
            StageClassSpec::Constants => false,
            StageClassSpec::Linear { signs, .. } => {
                signs.iter().any(|s| *s != SignConstraint::Free)
            }
        }
    }
}

/// Full policy class: per-stage rule sets plus an intertemporal restriction.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyClassSpec {
    pub stages: Vec<StageClassSpec>,
    pub intertemporal: IntertemporalKind,
}

impl PolicyClassSpec {
    pub fn new(stages: Vec<StageClassSpec>) -> Self {
        PolicyClassSpec {
            stages,
            intertemporal: IntertemporalKind::None,
        }
    }

    pub fn with_intertemporal(mut self, kind: IntertemporalKind) -> Self {
        self.intertemporal = kind;
        self
    }

    /// Validates selector indices and sign lengths against a dataset layout.
    pub fn validate(&self, ds: &PanelDataset) -> Result<()> {
        if self.stages.len() != ds.horizon {
            return Err(Error::DimensionMismatch {
                what: "policy class stages".into(),
                expected: ds.horizon,
                got: self.stages.len(),
            });
        }
        for (t, stage) in self.stages.iter().enumerate() {
            let hl = ds.history_len(t + 1)?;
            if let StageClassSpec::Linear { features, signs } = stage {
                if signs.len() != features.len() + 1 {
                    return Err(Error::InvalidPolicySpec {
                        message: format!(
                            "stage {}: {} sign entries for {} coefficients",
                            t + 1,
                            signs.len(),
                            features.len() + 1
                        ),
                    });
                }
                for f in features {
                    if f.max_index() >= hl {
                        return Err(Error::InvalidPolicySpec {
                            message: format!(
                                "stage {}: feature {} exceeds history length {}",
                                t + 1,
                                f,
                                hl
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

// ── Text serialization ───────────────────────────────────────────────────────

/// Renders a DTR in the plain-text key-value format.
///
/// ```text
/// format dtr-v1
/// horizon 2
/// outcome-offsets 1.02 3.5
/// stage 1
/// kind linear
/// features 0
/// beta -0.25 1
/// stage 2
/// kind constant
/// value 1
/// ```
///
/// Coefficients use the shortest round-trip decimal form, so write → parse is
/// exact.
pub fn dtr_to_text(dtr: &Dtr) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format dtr-v1");
    let _ = writeln!(out, "horizon {}", dtr.rules.len());
    if let Some(offsets) = &dtr.outcome_offsets {
        let _ = write!(out, "outcome-offsets");
        for v in offsets {
            let _ = write!(out, " {v}");
        }
        let _ = writeln!(out);
    }
    for rule in &dtr.rules {
        let _ = writeln!(out, "stage {}", rule.stage);
        match &rule.kind {
            RuleKind::Constant(v) => {
                let _ = writeln!(out, "kind constant");
                let _ = writeln!(out, "value {v}");
            }
            RuleKind::Linear { features, beta } => {
                let _ = writeln!(out, "kind linear");
                let _ = write!(out, "features");
                for f in features {
                    let _ = write!(out, " {f}");
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

fn parse_floats(toks: &[&str], line: usize) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| rule_err(line, format!("`{t}` is not a number")))
        })
        .collect()
}

/// Parses the plain-text DTR format.
pub fn dtr_from_text(text: &str) -> Result<Dtr> {
    let mut rd = LineReader::new(text);
    let (ln, toks) = rd.next().ok_or_else(|| rule_err(0, "empty file"))?;
    if toks != ["format", "dtr-v1"] {
        return Err(rule_err(ln, "expected `format dtr-v1`"));
    }
    let (ln, toks) = rd.next().ok_or_else(|| rule_err(ln, "missing `horizon`"))?;
    if toks.len() != 2 || toks[0] != "horizon" {
        return Err(rule_err(ln, "expected `horizon T`"));
    }
    let horizon: usize = toks[1]
        .parse()
        .map_err(|_| rule_err(ln, "horizon must be a positive integer"))?;
    if horizon == 0 {
        return Err(rule_err(ln, "horizon must be at least 1"));
    }

    let mut offsets = None;
    let mut pending = rd.next();
    if let Some((ln, toks)) = &pending {
        if toks[0] == "outcome-offsets" {
            let vals = parse_floats(&toks[1..], *ln)?;
            if vals.len() != horizon {
                return Err(rule_err(*ln, format!("expected {horizon} offsets")));
            }
            offsets = Some(vals);
            pending = rd.next();
        }
    }

    let mut rules = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let (ln, toks) =
            pending.ok_or_else(|| rule_err(0, format!("missing `stage {t}` block")))?;
        if toks.len() != 2 || toks[0] != "stage" || toks[1] != t.to_string() {
            return Err(rule_err(ln, format!("expected `stage {t}`")));
        }
        let (ln, toks) = rd.next().ok_or_else(|| rule_err(ln, "missing `kind`"))?;
        if toks.len() != 2 || toks[0] != "kind" {
            return Err(rule_err(ln, "expected `kind constant|linear`"));
        }
        let kind = match toks[1] {
            "constant" => {
                let (ln, toks) = rd.next().ok_or_else(|| rule_err(ln, "missing `value`"))?;
                if toks.len() != 2 || toks[0] != "value" {
                    return Err(rule_err(ln, "expected `value 0|1`"));
                }
                match toks[1] {
                    "0" => RuleKind::Constant(0),
                    "1" => RuleKind::Constant(1),
                    other => {
                        return Err(rule_err(ln, format!("value must be 0 or 1, got `{other}`")))
                    }
                }
            }
            "linear" => {
                let (ln, toks) = rd
                    .next()
                    .ok_or_else(|| rule_err(ln, "missing `features`"))?;
                if toks[0] != "features" {
                    return Err(rule_err(ln, "expected `features ..`"));
                }
                let features: Vec<FeatureRef> = toks[1..]
                    .iter()
                    .map(|t| {
                        parse_feature(t).ok_or_else(|| rule_err(ln, format!("bad feature `{t}`")))
                    })
                    .collect::<Result<_>>()?;
                let (ln2, toks) = rd.next().ok_or_else(|| rule_err(ln, "missing `beta`"))?;
                if toks[0] != "beta" {
                    return Err(rule_err(ln2, "expected `beta ..`"));
                }
                let beta = parse_floats(&toks[1..], ln2)?;
                if beta.len() != features.len() + 1 {
                    return Err(rule_err(
                        ln2,
                        format!("expected {} coefficients", features.len() + 1),
                    ));
                }
                RuleKind::Linear { features, beta }
            }
            other => return Err(rule_err(ln, format!("unknown rule kind `{other}`"))),
        };
        rules.push(StageRule { stage: t, kind });
        pending = rd.next();
    }
    if let Some((ln, _)) = pending {
        return Err(rule_err(ln, "trailing content after last stage"));
    }
    Ok(Dtr {
        rules,
        outcome_offsets: offsets,
    })
}

/// Writes a DTR to a file in the text format.
pub fn write_dtr(dtr: &Dtr, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dtr_to_text(dtr))?;
    Ok(())
}

/// Loads a DTR from a text-format file.
pub fn load_dtr(path: impl AsRef<Path>) -> Result<Dtr> {
    dtr_from_text(&std::fs::read_to_string(path)?)
}
