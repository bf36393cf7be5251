//! End-to-end runs of the `dewm` binary.

use std::path::Path;
use std::process::{Command, Output};

fn dewm(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dewm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate(dir: &Path, n: usize, seed: u64, name: &str) {
    let out = dewm(
        &[
            "simulate",
            "--dgp",
            "1",
            "--n",
            &n.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            name,
        ],
        dir,
    );
    assert_ok(&out);
}

#[test]
fn simulate_then_estimate_produces_fit_files() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 200, 7, "d.csv");
    assert!(dir.path().join("d.csv").exists());

    let out = dewm(
        &[
            "estimate",
            "--data",
            "d.csv",
            "--method",
            "backward",
            "--gamma",
            "0,1",
            "--class",
            "linear:0;linear:0,1",
            "--seed",
            "3",
            "--out",
            "fit.json",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let report = std::fs::read_to_string(dir.path().join("fit.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(parsed["empirical_welfare"].is_number());
    let dtr_text = std::fs::read_to_string(dir.path().join("fit.dtr")).unwrap();
    assert!(dtr_text.starts_with("format dtr-v1"));
}

#[test]
fn estimate_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 150, 11, "d.csv");
    let args = |out: &'static str| {
        vec![
            "estimate",
            "--data",
            "d.csv",
            "--method",
            "simultaneous",
            "--gamma",
            "0,1",
            "--class",
            "linear:0;linear:0,1",
            "--constraint",
            "start",
            "--seed",
            "5",
            "--out",
            out,
        ]
    };
    assert_ok(&dewm(&args("a.json"), dir.path()));
    assert_ok(&dewm(&args("b.json"), dir.path()));
    let a = std::fs::read(dir.path().join("a.json")).unwrap();
    let b = std::fs::read(dir.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    let a_dtr = std::fs::read(dir.path().join("a.dtr")).unwrap();
    let b_dtr = std::fs::read(dir.path().join("b.dtr")).unwrap();
    assert_eq!(a_dtr, b_dtr);
}

#[test]
fn evaluate_scores_saved_regime_both_ways() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 180, 13, "d.csv");
    assert_ok(&dewm(
        &[
            "estimate",
            "--data",
            "d.csv",
            "--method",
            "qlearning",
            "--gamma",
            "0,1",
            "--out",
            "fit.json",
        ],
        dir.path(),
    ));

    let on_data = dewm(
        &[
            "evaluate", "--dtr", "fit.dtr", "--data", "d.csv", "--gamma", "0,1",
        ],
        dir.path(),
    );
    assert_ok(&on_data);
    let text = String::from_utf8_lossy(&on_data.stdout);
    assert!(text.contains("\"welfare\""), "stdout: {text}");

    let on_oracle = dewm(
        &[
            "evaluate",
            "--dtr",
            "fit.dtr",
            "--dgp",
            "1",
            "--n-eval",
            "2000",
            "--seed",
            "1",
            "--out",
            "eval.json",
        ],
        dir.path(),
    );
    assert_ok(&on_oracle);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap())
            .unwrap();
    let w = report["oracle_welfare"].as_f64().unwrap();
    assert!(w > 1.0 && w < 3.0, "oracle welfare {w}");
}

#[test]
fn export_milp_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 40, 17, "d.csv");
    let args = |out: &'static str| {
        vec![
            "export-milp",
            "--data",
            "d.csv",
            "--method",
            "simultaneous",
            "--budget",
            "K=0.5,0.5",
            "C=0.5",
            "--alpha",
            "0",
            "--out",
            out,
        ]
    };
    assert_ok(&dewm(&args("a.lp"), dir.path()));
    assert_ok(&dewm(&args("b.lp"), dir.path()));
    let a = std::fs::read(dir.path().join("a.lp")).unwrap();
    let b = std::fs::read(dir.path().join("b.lp")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("Maximize\n"));
    assert!(text.contains("bud_0"));
    assert!(text.ends_with("End\n"));
}

#[test]
fn export_milp_backward_step_two_needs_fitted_rule() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 30, 19, "d.csv");
    let missing = dewm(
        &[
            "export-milp",
            "--data",
            "d.csv",
            "--method",
            "backward",
            "--step",
            "2",
            "--out",
            "x.lp",
        ],
        dir.path(),
    );
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("--dtr"));

    assert_ok(&dewm(
        &[
            "estimate",
            "--data",
            "d.csv",
            "--method",
            "backward",
            "--gamma",
            "0,1",
            "--class",
            "linear:0;linear:0,1",
            "--out",
            "fit.json",
        ],
        dir.path(),
    ));
    let step2 = dewm(
        &[
            "export-milp",
            "--data",
            "d.csv",
            "--method",
            "backward",
            "--step",
            "2",
            "--dtr",
            "fit.dtr",
            "--out",
            "s2.lp",
        ],
        dir.path(),
    );
    assert_ok(&step2);
    let text = std::fs::read_to_string(dir.path().join("s2.lp")).unwrap();
    assert!(text.contains("z1_0"));
    assert!(!text.contains("z2_0"));
}

#[test]
fn replicate_grid_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dewm(
        &[
            "replicate-table1",
            "--reps",
            "1",
            "--n-eval",
            "300",
            "--seed",
            "4",
            "--out",
            "reps.csv",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["n=200", "n=400", "n=600", "Q-learning", "B-DEWM", "S-DEWM"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }
    let csv = std::fs::read_to_string(dir.path().join("reps.csv")).unwrap();
    // Header plus 3 estimators × 3 designs × 3 sizes × 1 replication.
    assert_eq!(csv.lines().count(), 28);
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 120, 23, "d.csv");
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"method": "backward", "gamma": "0,1", "class": "linear:0;linear:0,1", "seed": 9}"#,
    )
    .unwrap();
    let from_config = dewm(
        &[
            "estimate", "--data", "d.csv", "--config", "cfg.json", "--out", "a.json",
        ],
        dir.path(),
    );
    assert_ok(&from_config);
    // The explicit flag overrides the config's method.
    let overridden = dewm(
        &[
            "estimate",
            "--data",
            "d.csv",
            "--config",
            "cfg.json",
            "--method",
            "qlearning",
            "--out",
            "b.json",
        ],
        dir.path(),
    );
    assert_ok(&overridden);
    let a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(a["strategy"], "stagewise");
    assert_eq!(b["strategy"], "regression");
}

#[test]
fn bad_flags_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 30, 29, "d.csv");
    let bad_method = dewm(
        &[
            "estimate", "--data", "d.csv", "--method", "forward", "--out", "x.json",
        ],
        dir.path(),
    );
    assert!(!bad_method.status.success());
    assert!(String::from_utf8_lossy(&bad_method.stderr).contains("forward"));

    let missing_file = dewm(
        &[
            "estimate", "--data", "nope.csv", "--method", "backward", "--out", "x.json",
        ],
        dir.path(),
    );
    assert!(!missing_file.status.success());
    assert!(String::from_utf8_lossy(&missing_file.stderr).contains("nope.csv"));

    let unknown_flag = dewm(&["estimate", "--mystery", "1"], dir.path());
    assert!(!unknown_flag.status.success());
    assert!(String::from_utf8_lossy(&unknown_flag.stderr).contains("--mystery"));
}

#[test]
fn threads_env_var_is_honored_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 60, 31, "d.csv");
    let ok = Command::new(env!("CARGO_BIN_EXE_dewm"))
        .args([
            "estimate",
            "--data",
            "d.csv",
            "--method",
            "qlearning",
            "--gamma",
            "0,1",
            "--out",
            "fit.json",
        ])
        .env("DEWM_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_ok(&ok);
    let bad = Command::new(env!("CARGO_BIN_EXE_dewm"))
        .args([
            "estimate",
            "--data",
            "d.csv",
            "--method",
            "qlearning",
            "--gamma",
            "0,1",
            "--out",
            "fit.json",
        ])
        .env("DEWM_THREADS", "many")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("DEWM_THREADS"));
}

#[test]
fn help_lists_every_documented_flag() {
    let dir = tempfile::tempdir().unwrap();
    let estimate_help = dewm(&["estimate", "--help"], dir.path());
    assert_ok(&estimate_help);
    let text = String::from_utf8_lossy(&estimate_help.stdout);
    for flag in [
        "--data",
        "--method",
        "--gamma",
        "--class",
        "--constraint",
        "--budget",
        "--alpha",
        "--delta",
        "--propensity",
        "--demean",
        "--seed",
        "--threads",
        "--out",
        "--config",
    ] {
        assert!(text.contains(flag), "estimate --help lacks {flag}");
    }
    let top = dewm(&["--help"], dir.path());
    assert_ok(&top);
    let top_text = String::from_utf8_lossy(&top.stdout);
    for sub in [
        "estimate",
        "simulate",
        "evaluate",
        "export-milp",
        "replicate-table1",
    ] {
        assert!(top_text.contains(sub), "top help lacks {sub}");
    }
}

#[test]
fn logistic_propensity_path_runs() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), 300, 37, "d.csv");
    let out = dewm(
        &[
            "estimate",
            "--data",
            "d.csv",
            "--method",
            "backward",
            "--gamma",
            "0,1",
            "--class",
            "linear:0;linear:0,1",
            "--propensity",
            "logistic:all",
            "--out",
            "fit.json",
        ],
        dir.path(),
    );
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fit.json")).unwrap())
            .unwrap();
    assert!(report["empirical_welfare"].is_number());
}
