//! Panel data model for multi-stage treatment problems.
//!
//! A dataset holds `n` independent trajectories observed over a fixed horizon
//! of `T` decision stages. Stage `t` of a trajectory records a binary
//! treatment `d_t`, a post-treatment outcome `y_t`, and a (possibly empty)
//! block of pre-treatment covariates `x_t`.
//!
//! The on-disk format is CSV with one row per trajectory and columns
//! `id, d1, y1, x1_1, .., x1_k1, d2, y2, x2_1, .., d T, yT, xT_1, ..`.
//! Stages are recovered from the header, so horizon and covariate dimensions
//! never need to be passed separately.
//!
//! Histories follow a single canonical layout everywhere in the crate: the
//! stage-`t` history vector is
//! `(d_1, .., d_{t-1}, y_1, .., y_{t-1}, x_1, .., x_t)` with each block in
//! stage-ascending order. Policy classes address features by index into this
//! vector.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One individual's observed path: treatments, outcomes, and covariates for
/// every stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Identifier carried through from the source file.
    pub id: String,
    /// Binary treatments `d_1..d_T`, each 0 or 1.
    pub treatments: Vec<u8>,
    /// Outcomes `y_1..y_T` as stored (raw or demeaned, per the dataset flag).
    pub outcomes: Vec<f64>,
    /// Covariate block per stage; `covariates[t-1]` has length `k_t`.
    pub covariates: Vec<Vec<f64>>,
}

/// A panel of trajectories sharing one horizon and covariate layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub trajectories: Vec<Trajectory>,
    /// Number of decision stages `T`.
    pub horizon: usize,
    /// Covariate dimension `k_t` per stage.
    pub covariate_dims: Vec<usize>,
    /// True when outcomes have been demeaned stage-by-stage.
    pub demeaned: bool,
    /// Stage means subtracted during demeaning (present iff `demeaned`).
    pub outcome_means: Option<Vec<f64>>,
}

/// Observable history entering the stage-`t` decision, in the canonical
/// layout `(d_1..d_{t-1}, y_1..y_{t-1}, x_1..x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryVector {
    /// Stage this history belongs to (1-based).
    pub stage: usize,
    pub values: Vec<f64>,
}

impl PanelDataset {
    /// Number of trajectories.
    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    /// Length of the canonical history vector at stage `t`.
    pub fn history_len(&self, t: usize) -> Result<usize> {
        self.check_stage(t)?;
        let covs: usize = self.covariate_dims[..t].iter().sum();
        Ok(2 * (t - 1) + covs)
    }

    /// Validates that `t` lies in `1..=T`.
    pub fn check_stage(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.horizon {
            return Err(Error::StageOutOfRange {
                stage: t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Builds a dataset from parts, validating shapes.
    pub fn new(
        trajectories: Vec<Trajectory>,
        horizon: usize,
        covariate_dims: Vec<usize>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Schema {
                message: "horizon must be at least 1".into(),
            });
        }
        if covariate_dims.len() != horizon {
            return Err(Error::DimensionMismatch {
                what: "covariate_dims".into(),
                expected: horizon,
                got: covariate_dims.len(),
            });
        }
        for traj in &trajectories {
            if traj.treatments.len() != horizon || traj.outcomes.len() != horizon {
                return Err(Error::DimensionMismatch {
                    what: format!("trajectory {}", traj.id),
                    expected: horizon,
                    got: traj.treatments.len().min(traj.outcomes.len()),
                });
            }
            if traj.covariates.len() != horizon {
                return Err(Error::DimensionMismatch {
                    what: format!("trajectory {} covariate blocks", traj.id),
                    expected: horizon,
                    got: traj.covariates.len(),
                });
            }
            for (t, block) in traj.covariates.iter().enumerate() {
                if block.len() != covariate_dims[t] {
                    return Err(Error::DimensionMismatch {
                        what: format!("trajectory {} covariates at stage {}", traj.id, t + 1),
                        expected: covariate_dims[t],
                        got: block.len(),
                    });
                }
            }
        }
        Ok(PanelDataset {
            trajectories,
            horizon,
            covariate_dims,
            demeaned: false,
            outcome_means: None,
        })
    }
}

/// Builds the canonical history vector for stage `t` of one trajectory.
pub fn history(traj: &Trajectory, t: usize) -> HistoryVector {
    history_with_offsets(traj, t, None)
}

/// History vector with optional per-stage outcome offsets subtracted from the
/// outcome block.
///
/// Rules fitted on demeaned data store the training means; evaluating such a
/// rule on raw outcomes must shift the outcome coordinates by those means so
/// the rule sees inputs on the scale it was fitted on.
pub fn history_with_offsets(
    traj: &Trajectory,
    t: usize,
    outcome_offsets: Option<&[f64]>,
) -> HistoryVector {
    let mut values = Vec::with_capacity(2 * (t - 1) + 4);
    for s in 0..t - 1 {
        values.push(f64::from(traj.treatments[s]));
    }
    for s in 0..t - 1 {
        let off = outcome_offsets.map_or(0.0, |o| o[s]);
        values.push(traj.outcomes[s] - off);
    }
    for s in 0..t {
        values.extend_from_slice(&traj.covariates[s]);
    }
    HistoryVector { stage: t, values }
}

/// Subtracts the stage-wise outcome means, returning the demeaned dataset.
///
/// The means are recorded on the result so fitted rules can be deployed on
/// raw data later. Demeaning twice is an error.
pub fn demean_outcomes(ds: &PanelDataset) -> Result<PanelDataset> {
    if ds.demeaned {
        return Err(Error::AlreadyDemeaned);
    }
    if ds.trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = ds.n() as f64;
    let mut means = vec![0.0; ds.horizon];
    for traj in &ds.trajectories {
        for (t, y) in traj.outcomes.iter().enumerate() {
            means[t] += y;
        }
    }
    for m in &mut means {
        *m /= n;
    }
    let mut out = ds.clone();
    for traj in &mut out.trajectories {
        for (t, y) in traj.outcomes.iter_mut().enumerate() {
            *y -= means[t];
        }
    }
    out.demeaned = true;
    out.outcome_means = Some(means);
    Ok(out)
}

// ── CSV schema ───────────────────────────────────────────────────────────────

/// Expected column names for a horizon/dimension layout.
fn schema_columns(horizon: usize, dims: &[usize]) -> Vec<String> {
    let mut cols = vec!["id".to_string()];
    for t in 1..=horizon {
        cols.push(format!("d{t}"));
        cols.push(format!("y{t}"));
        for j in 1..=dims[t - 1] {
            cols.push(format!("x{t}_{j}"));
        }
    }
    cols
}

/// Infers `(T, k_1..k_T)` from a CSV header.
fn parse_header(header: &[String]) -> Result<(usize, Vec<usize>)> {
    if header.first().map(String::as_str) != Some("id") {
        return Err(Error::Schema {
            message: format!(
                "first column must be `id`, found `{}`",
                header.first().cloned().unwrap_or_default()
            ),
        });
    }
    let mut horizon = 0usize;
    let mut dims = Vec::new();
    let mut i = 1;
    while i < header.len() {
        let t = horizon + 1;
        if header[i] != format!("d{t}") {
            return Err(Error::Schema {
                message: format!(
                    "expected column `d{t}` at position {i}, found `{}`",
                    header[i]
                ),
            });
        }
        i += 1;
        if i >= header.len() || header[i] != format!("y{t}") {
            return Err(Error::Schema {
                message: format!("expected column `y{t}` after `d{t}`"),
            });
        }
        i += 1;
        let mut k = 0usize;
        while i < header.len() && header[i] == format!("x{t}_{}", k + 1) {
            k += 1;
            i += 1;
        }
        dims.push(k);
        horizon = t;
    }
    if horizon == 0 {
        return Err(Error::Schema {
            message: "header declares no stages (no `d1` column)".into(),
        });
    }
    Ok((horizon, dims))
}

fn parse_f64(raw: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = raw.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

fn parse_treatment(raw: &str, row: usize, column: &str) -> Result<u8> {
    let v = parse_f64(raw, row, column)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("treatment must be 0 or 1, got `{raw}`"),
        })
    }
}

/// Loads a panel CSV, inferring the horizon and covariate dimensions from the
/// header. Row and column positions are reported on parse failures.
pub fn load_panel(path: impl AsRef<Path>) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let (horizon, dims) = parse_header(&header)?;
    let columns = schema_columns(horizon, &dims);

    let mut trajectories = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = idx + 2; // 1-based, after the header line
        if record.len() != columns.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, got {}", columns.len(), record.len()),
            });
        }
        let mut field = record.iter();
        let id = field.next().unwrap_or_default().to_string();
        let mut treatments = Vec::with_capacity(horizon);
        let mut outcomes = Vec::with_capacity(horizon);
        let mut covariates = Vec::with_capacity(horizon);
        let mut col = 1usize;
        for t in 1..=horizon {
            let d = parse_treatment(field.next().unwrap_or_default(), row, &columns[col])?;
            col += 1;
            let y = parse_f64(field.next().unwrap_or_default(), row, &columns[col])?;
            col += 1;
            let mut block = Vec::with_capacity(dims[t - 1]);
            for _ in 0..dims[t - 1] {
                block.push(parse_f64(
                    field.next().unwrap_or_default(),
                    row,
                    &columns[col],
                )?);
                col += 1;
            }
            treatments.push(d);
            outcomes.push(y);
            covariates.push(block);
        }
        trajectories.push(Trajectory {
            id,
            treatments,
            outcomes,
            covariates,
        });
    }
    if trajectories.is_empty() {
        return Err(Error::EmptyDataset);
    }
    PanelDataset::new(trajectories, horizon, dims)
}

/// Writes a panel back to CSV in the canonical column order.
///
/// Numbers are printed in Rust's shortest round-trip form, so a load of the
/// written file reproduces the numeric payload bit-for-bit.
pub fn write_panel(ds: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    writer.write_record(schema_columns(ds.horizon, &ds.covariate_dims))?;
    let mut buf = String::new();
    for traj in &ds.trajectories {
        let mut record = vec![traj.id.clone()];
        for t in 0..ds.horizon {
            record.push(traj.treatments[t].to_string());
            buf.clear();
            write!(&mut buf, "{}", traj.outcomes[t]).expect("write to string");
            record.push(buf.clone());
            for x in &traj.covariates[t] {
                buf.clear();
                write!(&mut buf, "{x}").expect("write to string");
                record.push(buf.clone());
            }
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PanelDataset {
        let trajectories = vec![
            Trajectory {
                id: "a".into(),
                treatments: vec![1, 0],
                outcomes: vec![0.4, 2.0],
                covariates: vec![vec![0.2], vec![0.9]],
            },
            Trajectory {
                id: "b".into(),
                treatments: vec![0, 1],
                outcomes: vec![-0.4, 1.0],
                covariates: vec![vec![-0.6], vec![0.1]],
            },
        ];
        PanelDataset::new(trajectories, 2, vec![1, 1]).unwrap()
    }

    #[test]
    fn history_layout_is_canonical() {
        let ds = toy();
        let h1 = history(&ds.trajectories[0], 1);
        assert_eq!(h1.values, vec![0.2]);
        let h2 = history(&ds.trajectories[0], 2);
        assert_eq!(h2.values, vec![1.0, 0.4, 0.2, 0.9]);
    }

    #[test]
    fn history_prefix_consistency() {
        let ds = toy();
        for traj in &ds.trajectories {
            let h1 = history(traj, 1);
            let h2 = history(traj, 2);
            // The stage-1 covariate block reappears unchanged inside stage 2.
            assert_eq!(h1.values[0], h2.values[2]);
        }
    }

    #[test]
    fn history_offsets_shift_outcome_block_only() {
        let ds = toy();
        let h = history_with_offsets(&ds.trajectories[0], 2, Some(&[0.1, 5.0]));
        assert_eq!(h.values, vec![1.0, 0.4 - 0.1, 0.2, 0.9]);
    }

    #[test]
    fn demean_centers_each_stage() {
        let ds = toy();
        let dm = demean_outcomes(&ds).unwrap();
        assert!(dm.demeaned);
        assert_eq!(dm.outcome_means.as_deref(), Some(&[0.0, 1.5][..]));
        assert_eq!(dm.trajectories[0].outcomes, vec![0.4, 0.5]);
        assert_eq!(dm.trajectories[1].outcomes, vec![-0.4, -0.5]);
        let total: f64 = dm.trajectories.iter().map(|tr| tr.outcomes[1]).sum();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn demean_twice_errors() {
        let dm = demean_outcomes(&toy()).unwrap();
        assert!(matches!(demean_outcomes(&dm), Err(Error::AlreadyDemeaned)));
    }

    #[test]
    fn single_value_demean() {
        let ds = PanelDataset::new(
            vec![Trajectory {
                id: "only".into(),
                treatments: vec![1],
                outcomes: vec![3.0],
                covariates: vec![vec![]],
            }],
            1,
            vec![0],
        )
        .unwrap();
        let dm = demean_outcomes(&ds).unwrap();
        assert_eq!(dm.trajectories[0].outcomes, vec![0.0]);
    }

    #[test]
    fn header_inference() {
        let hdr: Vec<String> = ["id", "d1", "y1", "x1_1", "x1_2", "d2", "y2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let (t, dims) = parse_header(&hdr).unwrap();
        assert_eq!(t, 2);
        assert_eq!(dims, vec![2, 0]);
    }

    #[test]
    fn header_rejects_gap() {
        let hdr: Vec<String> = ["id", "d1", "x1_1"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(parse_header(&hdr), Err(Error::Schema { .. })));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        let mut ds = toy();
        ds.trajectories[0].outcomes[1] = 0.1 + 0.2; // not exactly 0.3
        write_panel(&ds, &path).unwrap();
        let back = load_panel(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn load_reports_bad_treatment_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,d1,y1\nr1,1,0.5\nr2,7,0.5\n").unwrap();
        match load_panel(&path) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "d1");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_nan_outcome() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.csv");
        std::fs::write(&path, "id,d1,y1\nr1,1,NaN\n").unwrap();
        assert!(matches!(load_panel(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn stage_bounds_checked() {
        let ds = toy();
        assert!(ds.check_stage(0).is_err());
        assert!(ds.check_stage(3).is_err());
        assert_eq!(ds.history_len(2).unwrap(), 4);
    }
}
