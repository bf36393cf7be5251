//! Mixed-integer linear program export for two-stage problems.
//!
//! Both estimation problems admit an exact MILP formulation over linear
//! eligibility rules on the full stage histories: continuous variables
//! `b{t}_{j}` hold the stage-`t` rule coefficients (`j = 0` is the
//! intercept), binary variables `z{t}_{i}` hold the implied treatment of
//! observation `i` at stage `t`, and `z3_{i}` linearizes the product
//! `z1_{i}·z2_{i}` through its McCormick rows. The indicator constraints
//! `z = 1{score ≥ 0}` are encoded with big-M rows; the strict side uses a
//! documented tolerance `ε_strict` because LP text cannot express strict
//! inequalities.
//!
//! Rule coefficients are normalized to the box `‖β‖∞ ≤ 1`, which loses no
//! rules (thresholding is scale invariant) and makes
//! `C_it = 1 + ‖(1, H_it)‖₁` a valid big-M bound. The objective carries a
//! constant offset so its value at any feasible point equals `n` times the
//! empirical objective of the encoded rule, not just up to a constant.
//!
//! Budget rows bound the plain in-sample means `(1/n)·Σ_i z_it` combined
//! with the stage weights `K_tb`; intertemporal restrictions become linear
//! rows over `(z1_i, z2_i)`. [`write_lp`] serializes deterministically to
//! CPLEX-LP text and [`parse_lp`] reads that dialect back for verification.

use std::collections::HashMap;

use crate::data::{history, PanelDataset};
use crate::error::{Error, Result};
use crate::policy::{apply_rule, IntertemporalKind, StageRule};
use crate::propensity::{propensity_at, PropensityModel};
use crate::welfare::{BudgetSpec, WelfareWeights};

/// Strict-inequality tolerance used on the lower indicator rows.
pub const EPS_STRICT: f64 = 1e-6;

/// One decision variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    /// Lower bound; binaries use 0.
    pub lower: f64,
    /// Upper bound; binaries use 1.
    pub upper: f64,
    pub binary: bool,
}

/// A coefficient on one variable, by index into [`MilpModel::variables`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinTerm {
    pub var: usize,
    pub coef: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Ge,
    Eq,
}

/// One linear constraint row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub name: String,
    pub terms: Vec<LinTerm>,
    pub sense: RowSense,
    pub rhs: f64,
}

/// A built model: maximize `objective + objective_offset` subject to `rows`.
#[derive(Debug, Clone)]
pub struct MilpModel {
    pub variables: Vec<Variable>,
    pub objective: Vec<LinTerm>,
    /// Constant making the objective equal `n ×` the encoded empirical
    /// objective rather than differing by a data constant.
    pub objective_offset: f64,
    pub rows: Vec<Row>,
    /// Big-M constants per (observation, stage).
    pub big_m: Vec<(usize, usize, f64)>,
    pub eps_strict: f64,
    names: HashMap<String, usize>,
}

impl MilpModel {
    fn new() -> Self {
        MilpModel {
            variables: Vec::new(),
            objective: Vec::new(),
            objective_offset: 0.0,
            rows: Vec::new(),
            big_m: Vec::new(),
            eps_strict: EPS_STRICT,
            names: HashMap::new(),
        }
    }

    fn add_var(&mut self, name: String, lower: f64, upper: f64, binary: bool) -> usize {
        let idx = self.variables.len();
        self.names.insert(name.clone(), idx);
        self.variables.push(Variable {
            name,
            lower,
            upper,
            binary,
        });
        idx
    }

    /// Index of a variable by name.
    pub fn variable(&self, name: &str) -> Option<usize> {
        self.names.get(name).copied()
    }
}

fn check_two_stages(
    ds: &PanelDataset,
    pm: &PropensityModel,
    w: &WelfareWeights,
    op: &'static str,
) -> Result<()> {
    if ds.horizon != 2 {
        return Err(Error::UnsupportedHorizon {
            op,
            required: 2,
            got: ds.horizon,
        });
    }
    if pm.horizon() != 2 {
        return Err(Error::DimensionMismatch {
            what: "propensity stages".into(),
            expected: 2,
            got: pm.horizon(),
        });
    }
    if w.horizon() != 2 {
        return Err(Error::DimensionMismatch {
            what: "welfare weights".into(),
            expected: 2,
            got: w.horizon(),
        });
    }
    Ok(())
}

/// Score coefficient vector `(1, H_it)` for one observation and stage.
fn score_coords(ds: &PanelDataset, i: usize, t: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(1 + 4);
    v.push(1.0);
    v.extend_from_slice(&history(&ds.trajectories[i], t).values);
    v
}

/// Big-M bound `1 + ‖(1, H_it)‖₁`, strictly above any boxed score.
fn big_m_bound(coords: &[f64]) -> f64 {
    1.0 + coords.iter().map(|c| c.abs()).sum::<f64>()
}

/// Adds the coefficient box for stage `t` over `p` score coordinates and
/// returns the variable indices.
fn add_beta_vars(model: &mut MilpModel, t: usize, p: usize) -> Vec<usize> {
    (0..p)
        .map(|j| model.add_var(format!("b{t}_{j}"), -1.0, 1.0, false))
        .collect()
}

/// Adds the two indicator rows tying `z` to the sign of the stage score.
fn add_indicator_rows(
    model: &mut MilpModel,
    i: usize,
    t: usize,
    coords: &[f64],
    beta_vars: &[usize],
    z_var: usize,
) {
    let c = big_m_bound(coords);
    model.big_m.push((i, t, c));
    // score ≥ 0 whenever z = 1: C·z − score ≤ C.
    let mut up = vec![LinTerm {
        var: z_var,
        coef: c,
    }];
    for (j, &b) in beta_vars.iter().enumerate() {
        if coords[j] != 0.0 {
            up.push(LinTerm {
                var: b,
                coef: -coords[j],
            });
        }
    }
    model.rows.push(Row {
        name: format!("iup{t}_{i}"),
        terms: up,
        sense: RowSense::Le,
        rhs: c,
    });
    // score < 0 whenever z = 0, with tolerance: score − C(1+ε)·z ≤ −C·ε.
    let eps = model.eps_strict;
    let mut lo = Vec::with_capacity(beta_vars.len() + 1);
    for (j, &b) in beta_vars.iter().enumerate() {
        if coords[j] != 0.0 {
            lo.push(LinTerm {
                var: b,
                coef: coords[j],
            });
        }
    }
    lo.push(LinTerm {
        var: z_var,
        coef: -c * (1.0 + eps),
    });
    model.rows.push(Row {
        name: format!("ilo{t}_{i}"),
        terms: lo,
        sense: RowSense::Le,
        rhs: -c * eps,
    });
}

/// Builds one backward-induction step as a MILP.
///
/// Step 1 fits the stage-2 rule; step 2 fits the stage-1 rule given the
/// already-fitted stage-2 rule `fitted_g2`. The objective at any feasible
/// point equals `n ×` the corresponding backward stage objective of the
/// encoded rule.
pub fn build_backward_milp(
    ds: &PanelDataset,
    pm: &PropensityModel,
    w: &WelfareWeights,
    step: usize,
    fitted_g2: Option<&StageRule>,
) -> Result<MilpModel> {
    check_two_stages(ds, pm, w, "build_backward_milp")?;
    let stage = match step {
        1 => 2,
        2 => 1,
        other => {
            return Err(Error::Invalid(format!(
                "backward MILP step must be 1 or 2, got {other}"
            )))
        }
    };
    let g2 = if stage == 1 {
        let rule = fitted_g2.ok_or_else(|| Error::InvalidPolicySpec {
            message: "backward step 2 needs the fitted stage-2 rule".into(),
        })?;
        if rule.stage != 2 {
            return Err(Error::StageOutOfRange {
                stage: rule.stage,
                horizon: 2,
            });
        }
        Some(rule)
    } else {
        None
    };

    let n = ds.n();
    let mut model = MilpModel::new();
    let p = if n > 0 {
        score_coords(ds, 0, stage).len()
    } else {
        1
    };
    let beta_vars = add_beta_vars(&mut model, stage, p);
    let z_vars: Vec<usize> = (0..n)
        .map(|i| model.add_var(format!("z{stage}_{i}"), 0.0, 1.0, true))
        .collect();

    let mut offset = 0.0;
    for i in 0..n {
        let traj = &ds.trajectories[i];
        let (m, off) = match stage {
            2 => {
                let h2 = history(traj, 2);
                let d2 = traj.treatments[1];
                let gy2 = w.gamma[1] * traj.outcomes[1];
                let e1_arm = propensity_at(pm, 2, 1, &h2)?;
                let e0_arm = propensity_at(pm, 2, 0, &h2)?;
                let sign = f64::from(d2) / e1_arm - (1.0 - f64::from(d2)) / e0_arm;
                (sign * gy2, (1.0 - f64::from(d2)) / e0_arm * gy2)
            }
            _ => {
                let h1 = history(traj, 1);
                let h2 = history(traj, 2);
                let rule = g2.expect("stage-2 rule present");
                let g2_i = f64::from(apply_rule(rule, &h2)?);
                let d1 = f64::from(traj.treatments[0]);
                let d2 = f64::from(traj.treatments[1]);
                let e2_1 = propensity_at(pm, 2, 1, &h2)?;
                let e2_0 = propensity_at(pm, 2, 0, &h2)?;
                let follow2 = d2 * g2_i / e2_1 + (1.0 - d2) * (1.0 - g2_i) / e2_0;
                let bracket =
                    w.gamma[0] * traj.outcomes[0] + follow2 * w.gamma[1] * traj.outcomes[1];
                let e1_1 = propensity_at(pm, 1, 1, &h1)?;
                let e1_0 = propensity_at(pm, 1, 0, &h1)?;
                let sign = d1 / e1_1 - (1.0 - d1) / e1_0;
                (sign * bracket, (1.0 - d1) / e1_0 * bracket)
            }
        };
        if m != 0.0 {
            model.objective.push(LinTerm {
                var: z_vars[i],
                coef: m,
            });
        }
        offset += off;
    }
    model.objective_offset = offset;

    for i in 0..n {
        let coords = score_coords(ds, i, stage);
        add_indicator_rows(&mut model, i, stage, &coords, &beta_vars, z_vars[i]);
    }
    Ok(model)
}

/// Builds the joint two-stage problem as a MILP, optionally with budget and
/// intertemporal rows. The objective at any feasible point equals `n ×` the
/// empirical welfare of the encoded regime.
pub fn build_simultaneous_milp(
    ds: &PanelDataset,
    pm: &PropensityModel,
    w: &WelfareWeights,
    budget: Option<&BudgetSpec>,
    intertemporal: IntertemporalKind,
) -> Result<MilpModel> {
    check_two_stages(ds, pm, w, "build_simultaneous_milp")?;
    if let Some(spec) = budget {
        for (b, row) in spec.rows.iter().enumerate() {
            if row.k.len() != 2 {
                return Err(Error::DimensionMismatch {
                    what: format!("budget row {b} weights"),
                    expected: 2,
                    got: row.k.len(),
                });
            }
        }
    }

    let n = ds.n();
    let mut model = MilpModel::new();
    let p1 = if n > 0 {
        score_coords(ds, 0, 1).len()
    } else {
        1
    };
    let p2 = if n > 0 {
        score_coords(ds, 0, 2).len()
    } else {
        1
    };
    let beta1 = add_beta_vars(&mut model, 1, p1);
    let beta2 = add_beta_vars(&mut model, 2, p2);
    let z1: Vec<usize> = (0..n)
        .map(|i| model.add_var(format!("z1_{i}"), 0.0, 1.0, true))
        .collect();
    let z2: Vec<usize> = (0..n)
        .map(|i| model.add_var(format!("z2_{i}"), 0.0, 1.0, true))
        .collect();
    let z3: Vec<usize> = (0..n)
        .map(|i| model.add_var(format!("z3_{i}"), 0.0, 1.0, true))
        .collect();

    let mut offset = 0.0;
    for i in 0..n {
        let traj = &ds.trajectories[i];
        let h1 = history(traj, 1);
        let h2 = history(traj, 2);
        let d1 = f64::from(traj.treatments[0]);
        let d2 = f64::from(traj.treatments[1]);
        let e1 = propensity_at(pm, 1, traj.treatments[0], &h1)?;
        let e2 = propensity_at(pm, 2, traj.treatments[1], &h2)?;
        // First-stage IPW term and full-path IPW term of the welfare sum.
        let p_term = w.gamma[0] * traj.outcomes[0] / e1;
        let q_term = w.gamma[1] * traj.outcomes[1] / (e1 * e2);
        let s1 = 2.0 * d1 - 1.0;
        let s2 = 2.0 * d2 - 1.0;
        let m1 = s1 * (p_term + (1.0 - d2) * q_term);
        let m2 = (1.0 - d1) * s2 * q_term;
        let m3 = s1 * s2 * q_term;
        offset += (1.0 - d1) * p_term + (1.0 - d1) * (1.0 - d2) * q_term;
        for (var, m) in [(z1[i], m1), (z2[i], m2), (z3[i], m3)] {
            if m != 0.0 {
                model.objective.push(LinTerm { var, coef: m });
            }
        }
    }
    model.objective_offset = offset;

    for i in 0..n {
        for (t, (beta, z)) in [(&beta1, &z1), (&beta2, &z2)].iter().enumerate() {
            let t = t + 1;
            let coords = score_coords(ds, i, t);
            add_indicator_rows(&mut model, i, t, &coords, beta, z[i]);
        }
    }
    for i in 0..n {
        model.rows.push(Row {
            name: format!("mc1_{i}"),
            terms: vec![
                LinTerm {
                    var: z3[i],
                    coef: 1.0,
                },
                LinTerm {
                    var: z1[i],
                    coef: -1.0,
                },
            ],
            sense: RowSense::Le,
            rhs: 0.0,
        });
        model.rows.push(Row {
            name: format!("mc2_{i}"),
            terms: vec![
                LinTerm {
                    var: z3[i],
                    coef: 1.0,
                },
                LinTerm {
                    var: z2[i],
                    coef: -1.0,
                },
            ],
            sense: RowSense::Le,
            rhs: 0.0,
        });
        model.rows.push(Row {
            name: format!("mc3_{i}"),
            terms: vec![
                LinTerm {
                    var: z1[i],
                    coef: 1.0,
                },
                LinTerm {
                    var: z2[i],
                    coef: 1.0,
                },
                LinTerm {
                    var: z3[i],
                    coef: -1.0,
                },
            ],
            sense: RowSense::Le,
            rhs: 1.0,
        });
    }
    for i in 0..n {
        let row = match intertemporal {
            IntertemporalKind::None => None,
            IntertemporalKind::OneShot => Some(Row {
                name: format!("it_{i}"),
                terms: vec![
                    LinTerm {
                        var: z1[i],
                        coef: 1.0,
                    },
                    LinTerm {
                        var: z2[i],
                        coef: 1.0,
                    },
                ],
                sense: RowSense::Le,
                rhs: 1.0,
            }),
            IntertemporalKind::StartTime => Some(Row {
                name: format!("it_{i}"),
                terms: vec![
                    LinTerm {
                        var: z1[i],
                        coef: 1.0,
                    },
                    LinTerm {
                        var: z2[i],
                        coef: -1.0,
                    },
                ],
                sense: RowSense::Le,
                rhs: 0.0,
            }),
            IntertemporalKind::StopTime => Some(Row {
                name: format!("it_{i}"),
                terms: vec![
                    LinTerm {
                        var: z2[i],
                        coef: 1.0,
                    },
                    LinTerm {
                        var: z1[i],
                        coef: -1.0,
                    },
                ],
                sense: RowSense::Le,
                rhs: 0.0,
            }),
        };
        if let Some(row) = row {
            model.rows.push(row);
        }
    }
    if let Some(spec) = budget {
        for (b, brow) in spec.rows.iter().enumerate() {
            let mut terms = Vec::new();
            for (t, z) in [&z1, &z2].iter().enumerate() {
                let k = brow.k[t];
                if k == 0.0 || n == 0 {
                    continue;
                }
                let coef = k / n as f64;
                for &zv in z.iter() {
                    terms.push(LinTerm { var: zv, coef });
                }
            }
            model.rows.push(Row {
                name: format!("bud_{b}"),
                terms,
                sense: RowSense::Le,
                rhs: brow.c + spec.alpha_n,
            });
        }
    }
    Ok(model)
}

// ── LP text serialization ────────────────────────────────────────────────────

/// Formats a number with 17 significant digits, enough to round-trip `f64`.
fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_term(line: &mut String, first: bool, coef: f64, name: &str) {
    if first {
        if coef < 0.0 {
            line.push_str("- ");
        }
    } else if coef < 0.0 {
        line.push_str(" - ");
    } else {
        line.push_str(" + ");
    }
    line.push_str(&fmt_num(coef.abs()));
    line.push(' ');
    line.push_str(name);
}

/// Appends an expression line indented by one space, wrapping long lines
/// with continuation indents.
fn push_wrapped(out: &mut String, line: String) {
    const WIDTH: usize = 200;
    out.push(' ');
    let mut col = 1usize;
    let mut first = true;
    for piece in line.split(' ') {
        if piece.is_empty() {
            continue;
        }
        if !first && col + 1 + piece.len() > WIDTH {
            out.push_str("\n   ");
            col = 3;
        } else if !first {
            out.push(' ');
            col += 1;
        }
        out.push_str(piece);
        col += piece.len();
        first = false;
    }
    out.push('\n');
}

/// Serializes a model to deterministic CPLEX-LP text.
pub fn write_lp(model: &MilpModel) -> String {
    let mut out = String::new();
    out.push_str("Maximize\n");
    let mut obj = String::from(" obj: ");
    if model.objective.is_empty() && model.objective_offset == 0.0 {
        obj.push('0');
    } else {
        let mut first = true;
        for term in &model.objective {
            push_term(&mut obj, first, term.coef, &model.variables[term.var].name);
            first = false;
        }
        if model.objective_offset != 0.0 || first {
            let off = model.objective_offset;
            if first {
                if off < 0.0 {
                    obj.push_str("- ");
                }
            } else if off < 0.0 {
                obj.push_str(" - ");
            } else {
                obj.push_str(" + ");
            }
            obj.push_str(&fmt_num(off.abs()));
        }
    }
    push_wrapped(&mut out, obj);
    out.push_str("Subject To\n");
    for row in &model.rows {
        let mut line = format!(" {}: ", row.name);
        let mut first = true;
        for term in &row.terms {
            push_term(&mut line, first, term.coef, &model.variables[term.var].name);
            first = false;
        }
        if first {
            line.push('0');
        }
        let sense = match row.sense {
            RowSense::Le => "<=",
            RowSense::Ge => ">=",
            RowSense::Eq => "=",
        };
        line.push_str(&format!(" {} {}", sense, fmt_num(row.rhs)));
        push_wrapped(&mut out, line);
    }
    out.push_str("Bounds\n");
    for var in &model.variables {
        if !var.binary {
            out.push_str(&format!(
                " {} <= {} <= {}\n",
                fmt_num(var.lower),
                var.name,
                fmt_num(var.upper)
            ));
        }
    }
    out.push_str("Binaries\n");
    for var in &model.variables {
        if var.binary {
            out.push_str(&format!(" {}\n", var.name));
        }
    }
    out.push_str("End\n");
    out
}

// ── LP text parsing (round-trip verification) ────────────────────────────────

/// A constraint row as parsed back from LP text.
#[derive(Debug, Clone)]
pub struct ParsedRow {
    pub name: String,
    pub terms: HashMap<String, f64>,
    pub sense: RowSense,
    pub rhs: f64,
}

/// An LP file parsed back into coefficient maps.
#[derive(Debug, Clone)]
pub struct ParsedLp {
    pub objective: HashMap<String, f64>,
    pub objective_offset: f64,
    pub rows: Vec<ParsedRow>,
    pub bounds: HashMap<String, (f64, f64)>,
    pub binaries: Vec<String>,
}

impl ParsedLp {
    /// Objective value at a variable assignment (absent names read as 0).
    pub fn objective_value(&self, values: &HashMap<String, f64>) -> f64 {
        self.objective_offset
            + self
                .objective
                .iter()
                .map(|(name, c)| c * values.get(name).copied().unwrap_or(0.0))
                .sum::<f64>()
    }

    /// Whether row `idx` holds at an assignment, within `tol`.
    pub fn row_satisfied(&self, idx: usize, values: &HashMap<String, f64>, tol: f64) -> bool {
        let row = &self.rows[idx];
        let lhs: f64 = row
            .terms
            .iter()
            .map(|(name, c)| c * values.get(name).copied().unwrap_or(0.0))
            .sum();
        match row.sense {
            RowSense::Le => lhs <= row.rhs + tol,
            RowSense::Ge => lhs >= row.rhs - tol,
            RowSense::Eq => (lhs - row.rhs).abs() <= tol,
        }
    }
}

fn parse_error(line_no: usize, message: impl Into<String>) -> Error {
    Error::Invalid(format!("lp text line {line_no}: {}", message.into()))
}

/// Parses a linear expression with an optional trailing relation, returning
/// (terms, constant, relation text position).
fn parse_expression(
    tokens: &[&str],
    line_no: usize,
) -> Result<(HashMap<String, f64>, f64, Option<(RowSense, f64)>)> {
    let mut terms: HashMap<String, f64> = HashMap::new();
    let mut constant = 0.0;
    let mut relation: Option<(RowSense, f64)> = None;
    let mut sign = 1.0;
    let mut pending: Option<f64> = None;
    let mut idx = 0;
    while idx < tokens.len() {
        let tok = tokens[idx];
        match tok {
            "+" => {
                if let Some(c) = pending.take() {
                    constant += c;
                }
                sign = 1.0;
            }
            "-" => {
                if let Some(c) = pending.take() {
                    constant += c;
                }
                sign = -1.0;
            }
            "<=" | ">=" | "=" => {
                if let Some(c) = pending.take() {
                    constant += c;
                }
                let sense = match tok {
                    "<=" => RowSense::Le,
                    ">=" => RowSense::Ge,
                    _ => RowSense::Eq,
                };
                let rhs_tok = tokens
                    .get(idx + 1)
                    .ok_or_else(|| parse_error(line_no, "missing right-hand side"))?;
                let rhs: f64 = rhs_tok
                    .parse()
                    .map_err(|_| parse_error(line_no, format!("bad number {rhs_tok}")))?;
                if idx + 2 != tokens.len() {
                    return Err(parse_error(
                        line_no,
                        "trailing tokens after right-hand side",
                    ));
                }
                relation = Some((sense, rhs));
                break;
            }
            _ => {
                if let Ok(num) = tok.parse::<f64>() {
                    if let Some(c) = pending.take() {
                        constant += c;
                    }
                    pending = Some(sign * num);
                    sign = 1.0;
                } else {
                    let coef = pending.take().unwrap_or(sign);
                    sign = 1.0;
                    *terms.entry(tok.to_string()).or_insert(0.0) += coef;
                }
            }
        }
        idx += 1;
    }
    if let Some(c) = pending.take() {
        constant += c;
    }
    Ok((terms, constant, relation))
}

/// Parses the CPLEX-LP dialect emitted by [`write_lp`].
pub fn parse_lp(text: &str) -> Result<ParsedLp> {
    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        Start,
        Objective,
        Rows,
        Bounds,
        Binaries,
        Done,
    }
    let mut section = Section::Start;
    let mut parsed = ParsedLp {
        objective: HashMap::new(),
        objective_offset: 0.0,
        rows: Vec::new(),
        bounds: HashMap::new(),
        binaries: Vec::new(),
    };
    // (name, token strings, starting line) of expressions under assembly.
    let mut pending: Option<(String, Vec<String>, usize)> = None;

    let finish = |parsed: &mut ParsedLp,
                  entry: Option<(String, Vec<String>, usize)>,
                  is_obj: bool|
     -> Result<()> {
        let Some((name, tokens, line_no)) = entry else {
            return Ok(());
        };
        let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
        let (terms, constant, relation) = parse_expression(&refs, line_no)?;
        if is_obj {
            if relation.is_some() {
                return Err(parse_error(line_no, "objective cannot carry a relation"));
            }
            parsed.objective = terms;
            parsed.objective_offset = constant;
        } else {
            let (sense, rhs) = relation
                .ok_or_else(|| parse_error(line_no, format!("row {name} lacks a relation")))?;
            parsed.rows.push(ParsedRow {
                name,
                terms,
                sense,
                rhs: rhs - constant,
            });
        }
        Ok(())
    };

    for (ln0, raw) in text.lines().enumerate() {
        let line_no = ln0 + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('\\') {
            continue;
        }
        let lowered = trimmed.to_ascii_lowercase();
        let new_section = match lowered.as_str() {
            "maximize" => Some(Section::Objective),
            "subject to" => Some(Section::Rows),
            "bounds" => Some(Section::Bounds),
            "binaries" | "binary" => Some(Section::Binaries),
            "end" => Some(Section::Done),
            _ => None,
        };
        if let Some(next) = new_section {
            let closing = pending.take();
            match section {
                Section::Objective => finish(&mut parsed, closing, true)?,
                Section::Rows => finish(&mut parsed, closing, false)?,
                _ => {}
            }
            section = next;
            continue;
        }
        match section {
            Section::Start => return Err(parse_error(line_no, "content before Maximize")),
            Section::Done => return Err(parse_error(line_no, "content after End")),
            Section::Objective | Section::Rows => {
                let is_obj = section == Section::Objective;
                if let Some(colon) = trimmed.find(':') {
                    let closing = pending.take();
                    finish(&mut parsed, closing, is_obj)?;
                    let name = trimmed[..colon].trim().to_string();
                    let rest = trimmed[colon + 1..]
                        .split_whitespace()
                        .map(str::to_string)
                        .collect();
                    pending = Some((name, rest, line_no));
                } else if let Some((_, tokens, _)) = &mut pending {
                    tokens.extend(trimmed.split_whitespace().map(str::to_string));
                } else {
                    return Err(parse_error(line_no, "expression without a label"));
                }
            }
            Section::Bounds => {
                let tokens: Vec<&str> = trimmed.split_whitespace().collect();
                if tokens.len() != 5 || tokens[1] != "<=" || tokens[3] != "<=" {
                    return Err(parse_error(line_no, "expected `lo <= name <= hi`"));
                }
                let lo: f64 = tokens[0]
                    .parse()
                    .map_err(|_| parse_error(line_no, "bad lower bound"))?;
                let hi: f64 = tokens[4]
                    .parse()
                    .map_err(|_| parse_error(line_no, "bad upper bound"))?;
                parsed.bounds.insert(tokens[2].to_string(), (lo, hi));
            }
            Section::Binaries => {
                for tok in trimmed.split_whitespace() {
                    parsed.binaries.push(tok.to_string());
                }
            }
        }
    }
    if section != Section::Done {
        return Err(Error::Invalid("lp text missing End marker".into()));
    }
    Ok(parsed)
}
