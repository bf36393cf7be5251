//! `dewm`: batch front end for the dynamic treatment regime toolkit.
//!
//! Subcommands: `estimate` fits a regime to a panel CSV and writes a report
//! plus a regime file; `simulate` draws benchmark datasets; `evaluate`
//! scores a saved regime on a dataset or against a design oracle;
//! `export-milp` writes a two-stage problem as CPLEX-LP text;
//! `replicate-table1` runs the benchmark Monte Carlo grid.
//!
//! Every run is reproducible from its flag set and seed. Worker threads
//! come from `--threads`, then the `DEWM_THREADS` environment variable,
//! then all available cores.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dewm_core::{
    build_backward_milp, build_simultaneous_milp, default_alpha, demean_outcomes, fit_backward,
    fit_logistic_model, fit_qlearning, fit_simultaneous, generate_dgp, load_dtr, load_panel,
    oracle_welfare, replicate_table1, welfare_report, write_dtr, write_lp, write_panel,
    write_replication_csv, BudgetRow, BudgetSpec, DgpSpec, Dtr, EstimationConfig, FeatureRef,
    FitResult, IntertemporalKind, PanelDataset, PolicyClassSpec, PropensityModel, SignConstraint,
    StageClassSpec, WelfareWeights,
};

#[derive(Parser)]
#[command(
    name = "dewm",
    version,
    about = "Estimate and evaluate multi-stage treatment regimes by empirical welfare maximization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a treatment regime to a panel CSV
    Estimate(EstimateArgs),
    /// Draw a dataset from a benchmark design and write it as CSV
    Simulate(SimulateArgs),
    /// Score a saved regime on a dataset or against a design oracle
    Evaluate(EvaluateArgs),
    /// Write a two-stage estimation problem as a CPLEX-LP file
    #[command(name = "export-milp")]
    ExportMilp(ExportMilpArgs),
    /// Run the benchmark Monte Carlo grid and print the results table
    #[command(name = "replicate-table1")]
    ReplicateTable1(ReplicateArgs),
}

/// Options shared by the fitting and exporting subcommands.
#[derive(Args, Clone, Default)]
struct EstimationOpts {
    /// Panel CSV path
    #[arg(long)]
    data: Option<PathBuf>,

    /// Welfare weights g_1..g_T, comma-separated [default: terminal stage only]
    #[arg(long)]
    gamma: Option<String>,

    /// Per-stage policy class, ';'-separated: `const` or `linear:FEATURES`
    /// where FEATURES is a comma list of history coordinates `i`, products
    /// `i*j`, each with optional sign suffix `+`/`-` [default: every history
    /// coordinate, unconstrained]
    #[arg(long)]
    class: Option<String>,

    /// Intertemporal restriction: none | oneshot | start | stop [default: none]
    #[arg(long)]
    constraint: Option<String>,

    /// Budget row as two tokens `K=k1,..,kT C=c`; repeat for several rows
    #[arg(long, num_args = 2, action = clap::ArgAction::Append)]
    budget: Option<Vec<String>>,

    /// Budget slack alpha_n [default: sqrt(ln(6B/delta)/(2n))]
    #[arg(long)]
    alpha: Option<f64>,

    /// Confidence level for the default budget slack [default: 0.05]
    #[arg(long)]
    delta: Option<f64>,

    /// Propensity model: `known:<p>` or `logistic:<selector>` with per-stage
    /// ';'-separated history-coordinate lists, or `logistic:all`
    /// [default: known:0.5]
    #[arg(long)]
    propensity: Option<String>,

    /// Demean outcomes stage-by-stage before fitting: on | off
    /// [default: on for welfare methods, off for qlearning]
    #[arg(long)]
    demean: Option<String>,

    /// Seed for randomized search restarts [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    opts: EstimationOpts,

    /// Fitting method: backward | simultaneous | qlearning
    #[arg(long)]
    method: Option<String>,

    /// JSON file of flag defaults (explicit flags take precedence)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Worker threads [fallback: DEWM_THREADS, then all cores]
    #[arg(long)]
    threads: Option<usize>,

    /// Fit report JSON path; the regime is also written with extension .dtr
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Benchmark design: 1 | 2 | 3 | remark1
    #[arg(long)]
    dgp: String,

    /// Sample size
    #[arg(long)]
    n: usize,

    /// Generation seed
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Saved regime file (text format)
    #[arg(long)]
    dtr: PathBuf,

    /// Panel CSV to score empirically
    #[arg(long)]
    data: Option<PathBuf>,

    /// Benchmark design oracle to score against: 1 | 2 | 3 | remark1
    #[arg(long, conflicts_with = "data")]
    dgp: Option<String>,

    /// Welfare weights for --data scoring [default: terminal stage only]
    #[arg(long)]
    gamma: Option<String>,

    /// Propensity model for --data scoring [default: known:0.5]
    #[arg(long)]
    propensity: Option<String>,

    /// Oracle evaluation draws
    #[arg(long, default_value_t = 3000)]
    n_eval: usize,

    /// Oracle evaluation seed
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Report JSON path [default: print to stdout]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportMilpArgs {
    /// Panel CSV path
    #[arg(long)]
    data: PathBuf,

    /// Problem family: backward | simultaneous
    #[arg(long)]
    method: String,

    /// Welfare weights g_1,g_2 [default: 0,1]
    #[arg(long)]
    gamma: Option<String>,

    /// Intertemporal restriction rows (simultaneous only):
    /// none | oneshot | start | stop [default: none]
    #[arg(long)]
    constraint: Option<String>,

    /// Budget row as two tokens `K=k1,k2 C=c` (simultaneous only)
    #[arg(long, num_args = 2, action = clap::ArgAction::Append)]
    budget: Option<Vec<String>>,

    /// Budget slack alpha_n [default: sqrt(ln(6B/delta)/(2n))]
    #[arg(long)]
    alpha: Option<f64>,

    /// Confidence level for the default budget slack [default: 0.05]
    #[arg(long)]
    delta: Option<f64>,

    /// Propensity model: `known:<p>` or `logistic:<selector>` [default: known:0.5]
    #[arg(long)]
    propensity: Option<String>,

    /// Demean outcomes before encoding: on | off [default: on]
    #[arg(long)]
    demean: Option<String>,

    /// Backward pass step: 1 encodes the stage-2 fit, 2 the stage-1 fit
    #[arg(long, default_value_t = 1)]
    step: usize,

    /// Regime file supplying the fitted stage-2 rule for --step 2
    #[arg(long)]
    dtr: Option<PathBuf>,

    /// Output .lp path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplicateArgs {
    /// Replications per cell
    #[arg(long, default_value_t = 100)]
    reps: usize,

    /// Oracle evaluation draws per replication
    #[arg(long, default_value_t = 3000)]
    n_eval: usize,

    /// Master seed
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Worker threads [fallback: DEWM_THREADS, then all cores]
    #[arg(long)]
    threads: Option<usize>,

    /// Per-replication CSV output path
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(args) => cmd_estimate(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::ExportMilp(args) => cmd_export_milp(args),
        Command::ReplicateTable1(args) => cmd_replicate(args),
    }
}

/// Installs the global worker pool: flag, then DEWM_THREADS, then default.
fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("DEWM_THREADS") {
            Ok(raw) => Some(
                raw.parse::<usize>()
                    .map_err(|_| anyhow!("DEWM_THREADS is not a thread count: {raw:?}"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        // A second init in the same process keeps the first pool; fine here.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

// ── Flag parsing helpers ─────────────────────────────────────────────────────

fn parse_gamma(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("--gamma entry is not a number: {tok:?}"))
        })
        .collect()
}

fn terminal_gamma(horizon: usize) -> Vec<f64> {
    let mut g = vec![0.0; horizon];
    g[horizon - 1] = 1.0;
    g
}

fn parse_constraint(raw: &str) -> Result<IntertemporalKind> {
    match raw {
        "none" => Ok(IntertemporalKind::None),
        "oneshot" => Ok(IntertemporalKind::OneShot),
        "start" => Ok(IntertemporalKind::StartTime),
        "stop" => Ok(IntertemporalKind::StopTime),
        other => bail!("--constraint must be none|oneshot|start|stop, got {other:?}"),
    }
}

/// One feature token: coordinate `i` or product `i*j`, optional `+`/`-`
/// sign suffix constraining its coefficient.
fn parse_feature(tok: &str) -> Result<(FeatureRef, SignConstraint)> {
    let tok = tok.trim();
    let (body, sign) = match tok.as_bytes().last() {
        Some(b'+') => (&tok[..tok.len() - 1], SignConstraint::NonNegative),
        Some(b'-') => (&tok[..tok.len() - 1], SignConstraint::NonPositive),
        _ => (tok, SignConstraint::Free),
    };
    let feature = if let Some((a, b)) = body.split_once('*') {
        let i = a
            .trim()
            .parse::<usize>()
            .map_err(|_| anyhow!("bad feature index {a:?} in {tok:?}"))?;
        let j = b
            .trim()
            .parse::<usize>()
            .map_err(|_| anyhow!("bad feature index {b:?} in {tok:?}"))?;
        FeatureRef::Product(i, j)
    } else {
        let i = body
            .trim()
            .parse::<usize>()
            .map_err(|_| anyhow!("bad feature index {body:?} in {tok:?}"))?;
        FeatureRef::Single(i)
    };
    Ok((feature, sign))
}

fn parse_stage_class(raw: &str) -> Result<StageClassSpec> {
    let raw = raw.trim();
    if raw == "const" {
        return Ok(StageClassSpec::Constants);
    }
    let Some(rest) = raw.strip_prefix("linear:") else {
        bail!("stage class must be `const` or `linear:FEATURES`, got {raw:?}");
    };
    let mut features = Vec::new();
    let mut signs = vec![SignConstraint::Free];
    for tok in rest.split(',') {
        let (feature, sign) = parse_feature(tok)?;
        features.push(feature);
        signs.push(sign);
    }
    if features.is_empty() {
        bail!("linear stage class needs at least one feature");
    }
    Ok(StageClassSpec::Linear { features, signs })
}

/// Full class string: per-stage specs separated by ';'.
fn parse_class(raw: &str, horizon: usize) -> Result<PolicyClassSpec> {
    let stages = raw
        .split(';')
        .map(parse_stage_class)
        .collect::<Result<Vec<_>>>()?;
    if stages.len() != horizon {
        bail!(
            "--class lists {} stage(s) but the data has {horizon}",
            stages.len()
        );
    }
    Ok(PolicyClassSpec::new(stages))
}

/// Default class: every history coordinate of every stage, unconstrained.
fn full_history_class(ds: &PanelDataset) -> Result<PolicyClassSpec> {
    let stages = (1..=ds.horizon)
        .map(|t| {
            let len = ds.history_len(t)?;
            Ok(StageClassSpec::linear(
                (0..len).map(FeatureRef::Single).collect(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicyClassSpec::new(stages))
}

/// Budget tokens come in `K=..` `C=..` pairs, one pair per row.
fn parse_budget(tokens: &[String], horizon: usize) -> Result<Vec<BudgetRow>> {
    if tokens.len() % 2 != 0 {
        bail!("--budget expects `K=..` and `C=..` token pairs");
    }
    tokens
        .chunks(2)
        .map(|pair| {
            let k_raw = pair[0]
                .strip_prefix("K=")
                .ok_or_else(|| anyhow!("budget token {:?} should start with K=", pair[0]))?;
            let c_raw = pair[1]
                .strip_prefix("C=")
                .ok_or_else(|| anyhow!("budget token {:?} should start with C=", pair[1]))?;
            let k = k_raw
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|_| anyhow!("budget weight is not a number: {tok:?}"))
                })
                .collect::<Result<Vec<f64>>>()?;
            if k.len() != horizon {
                bail!(
                    "budget row lists {} stage weight(s), data has {horizon}",
                    k.len()
                );
            }
            let c = c_raw
                .trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("budget cap is not a number: {c_raw:?}"))?;
            Ok(BudgetRow { k, c })
        })
        .collect()
}

fn parse_propensity(raw: &str, ds: &PanelDataset) -> Result<PropensityModel> {
    if let Some(p_raw) = raw.strip_prefix("known:") {
        let p = p_raw
            .parse::<f64>()
            .map_err(|_| anyhow!("--propensity known value is not a number: {p_raw:?}"))?;
        return Ok(PropensityModel::known_constant(ds.horizon, p)?);
    }
    if let Some(sel_raw) = raw.strip_prefix("logistic:") {
        let selectors: Vec<Vec<usize>> = if sel_raw == "all" {
            (1..=ds.horizon)
                .map(|t| Ok((0..ds.history_len(t)?).collect()))
                .collect::<Result<_>>()?
        } else {
            let per_stage = sel_raw
                .split(';')
                .map(|stage| {
                    stage
                        .split(',')
                        .filter(|tok| !tok.trim().is_empty())
                        .map(|tok| {
                            tok.trim().parse::<usize>().map_err(|_| {
                                anyhow!("--propensity selector index is not a number: {tok:?}")
                            })
                        })
                        .collect::<Result<Vec<usize>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            if per_stage.len() != ds.horizon {
                bail!(
                    "--propensity selector lists {} stage(s), data has {}",
                    per_stage.len(),
                    ds.horizon
                );
            }
            per_stage
        };
        return Ok(fit_logistic_model(ds, &selectors, 0.01)?);
    }
    bail!("--propensity must be known:<p> or logistic:<selector>, got {raw:?}")
}

fn parse_demean(raw: &str) -> Result<bool> {
    match raw {
        "on" => Ok(true),
        "off" => Ok(false),
        other => bail!("--demean must be on|off, got {other:?}"),
    }
}

fn parse_dgp(raw: &str) -> Result<DgpSpec> {
    match raw {
        "1" => Ok(DgpSpec::dgp1()),
        "2" => Ok(DgpSpec::dgp2()),
        "3" => Ok(DgpSpec::dgp3()),
        "remark1" => Ok(DgpSpec::remark1()),
        other => bail!("--dgp must be 1|2|3|remark1, got {other:?}"),
    }
}

// ── Config-file defaults ─────────────────────────────────────────────────────

/// Reads a JSON object of flag defaults; values may be strings, numbers, or
/// arrays of strings (for --budget).
fn load_config(path: &Path) -> Result<HashMap<String, serde_json::Value>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    let serde_json::Value::Object(map) = value else {
        bail!("config file must hold a JSON object of flag defaults");
    };
    Ok(map.into_iter().collect())
}

fn config_string(map: &HashMap<String, serde_json::Value>, key: &str) -> Result<Option<String>> {
    match map.get(key) {
        None => Ok(None),
        Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
        Some(serde_json::Value::Number(n)) => Ok(Some(n.to_string())),
        Some(other) => bail!("config key {key:?} should be a string or number, got {other}"),
    }
}

/// Fills unset options from the config map; explicit flags keep precedence.
fn apply_config(
    opts: &mut EstimationOpts,
    method: &mut Option<String>,
    map: &HashMap<String, serde_json::Value>,
) -> Result<()> {
    for key in map.keys() {
        let known = [
            "data",
            "method",
            "gamma",
            "class",
            "constraint",
            "budget",
            "alpha",
            "delta",
            "propensity",
            "demean",
            "seed",
        ];
        if !known.contains(&key.as_str()) {
            bail!("config key {key:?} does not name a supported flag");
        }
    }
    if method.is_none() {
        *method = config_string(map, "method")?;
    }
    if opts.data.is_none() {
        opts.data = config_string(map, "data")?.map(PathBuf::from);
    }
    for (slot, key) in [
        (&mut opts.gamma, "gamma"),
        (&mut opts.class, "class"),
        (&mut opts.constraint, "constraint"),
        (&mut opts.propensity, "propensity"),
        (&mut opts.demean, "demean"),
    ] {
        if slot.is_none() {
            *slot = config_string(map, key)?;
        }
    }
    if opts.alpha.is_none() {
        opts.alpha = config_string(map, "alpha")?
            .map(|s| s.parse::<f64>().map_err(|_| anyhow!("config alpha: {s:?}")))
            .transpose()?;
    }
    if opts.delta.is_none() {
        opts.delta = config_string(map, "delta")?
            .map(|s| s.parse::<f64>().map_err(|_| anyhow!("config delta: {s:?}")))
            .transpose()?;
    }
    if opts.seed.is_none() {
        opts.seed = config_string(map, "seed")?
            .map(|s| s.parse::<u64>().map_err(|_| anyhow!("config seed: {s:?}")))
            .transpose()?;
    }
    if opts.budget.is_none() {
        if let Some(serde_json::Value::Array(items)) = map.get("budget") {
            let tokens = items
                .iter()
                .map(|v| match v {
                    serde_json::Value::String(s) => Ok(s.clone()),
                    other => Err(anyhow!(
                        "config budget entries should be strings, got {other}"
                    )),
                })
                .collect::<Result<Vec<_>>>()?;
            opts.budget = Some(tokens);
        } else if map.contains_key("budget") {
            bail!("config key \"budget\" should be an array of K=/C= strings");
        }
    }
    Ok(())
}

// ── Subcommands ──────────────────────────────────────────────────────────────

/// Resolved estimation inputs shared by `estimate` and `export-milp`.
struct Prepared {
    ds: PanelDataset,
    pm: PropensityModel,
    weights: WelfareWeights,
    budget: Option<BudgetSpec>,
}

fn prepare(
    data: &Path,
    gamma: Option<&str>,
    propensity: Option<&str>,
    demean: bool,
    budget_tokens: Option<&[String]>,
    alpha: Option<f64>,
    delta: f64,
) -> Result<Prepared> {
    let raw = load_panel(data).with_context(|| format!("loading {}", data.display()))?;
    let ds = if demean { demean_outcomes(&raw)? } else { raw };
    let gamma = match gamma {
        Some(s) => parse_gamma(s)?,
        None => terminal_gamma(ds.horizon),
    };
    let weights = WelfareWeights::new(gamma)?;
    let pm = parse_propensity(propensity.unwrap_or("known:0.5"), &ds)?;
    let budget = match budget_tokens {
        Some(tokens) => {
            let rows = parse_budget(tokens, ds.horizon)?;
            let alpha_n = match alpha {
                Some(a) => a,
                None => default_alpha(rows.len(), delta, ds.n()),
            };
            Some(BudgetSpec::new(rows, alpha_n)?)
        }
        None => None,
    };
    Ok(Prepared {
        ds,
        pm,
        weights,
        budget,
    })
}

fn cmd_estimate(mut args: EstimateArgs) -> Result<()> {
    configure_threads(args.threads)?;
    if let Some(path) = &args.config {
        let map = load_config(path)?;
        apply_config(&mut args.opts, &mut args.method, &map)?;
    }
    let method = args
        .method
        .as_deref()
        .ok_or_else(|| anyhow!("--method is required (backward|simultaneous|qlearning)"))?;
    if !["backward", "simultaneous", "qlearning"].contains(&method) {
        bail!("--method must be backward|simultaneous|qlearning, got {method:?}");
    }
    let data = args
        .opts
        .data
        .as_deref()
        .ok_or_else(|| anyhow!("--data is required"))?;
    let demean = match args.opts.demean.as_deref() {
        Some(s) => parse_demean(s)?,
        None => method != "qlearning",
    };
    let prepared = prepare(
        data,
        args.opts.gamma.as_deref(),
        args.opts.propensity.as_deref(),
        demean,
        args.opts.budget.as_deref(),
        args.opts.alpha,
        args.opts.delta.unwrap_or(0.05),
    )?;
    let class = match args.opts.class.as_deref() {
        Some(s) => parse_class(s, prepared.ds.horizon)?,
        None => full_history_class(&prepared.ds)?,
    };
    let kind = parse_constraint(args.opts.constraint.as_deref().unwrap_or("none"))?;
    let mut cfg = EstimationConfig::new(prepared.weights.clone(), class.with_intertemporal(kind));
    cfg.seed = args.opts.seed.unwrap_or(0);
    cfg.budget = prepared.budget.clone();
    if let Some(delta) = args.opts.delta {
        cfg.delta = delta;
    }

    let fit: FitResult = match method {
        "backward" => fit_backward(&prepared.ds, &prepared.pm, &cfg)?,
        "simultaneous" => fit_simultaneous(&prepared.ds, &prepared.pm, &cfg)?,
        _ => fit_qlearning(&prepared.ds, &prepared.pm, &cfg)?,
    };

    std::fs::write(&args.out, fit.metrics_json())
        .with_context(|| format!("writing {}", args.out.display()))?;
    let dtr_path = args.out.with_extension("dtr");
    write_dtr(&fit.dtr, &dtr_path)?;
    println!(
        "fitted {method}: welfare {:.6}; report {}; regime {}",
        fit.empirical_welfare,
        args.out.display(),
        dtr_path.display()
    );
    for warning in &fit.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    let spec = parse_dgp(&args.dgp)?;
    let ds = generate_dgp(&spec, args.n, args.seed)?;
    write_panel(&ds, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} trajectories from design {} to {}",
        args.n,
        args.dgp,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let dtr: Dtr = load_dtr(&args.dtr)?;
    let report = match (&args.data, &args.dgp) {
        (Some(data), None) => {
            let ds = load_panel(data).with_context(|| format!("loading {}", data.display()))?;
            let gamma = match args.gamma.as_deref() {
                Some(s) => parse_gamma(s)?,
                None => terminal_gamma(ds.horizon),
            };
            let weights = WelfareWeights::new(gamma)?;
            let pm = parse_propensity(args.propensity.as_deref().unwrap_or("known:0.5"), &ds)?;
            let rep = welfare_report(&ds, &dtr, &pm, &weights, None)?;
            serde_json::json!({
                "source": "data",
                "data": data.display().to_string(),
                "report": rep,
            })
        }
        (None, Some(dgp)) => {
            let spec = parse_dgp(dgp)?;
            if args.n_eval == 0 {
                bail!("--n-eval must be at least 1");
            }
            let value = oracle_welfare(&dtr, &spec, args.n_eval, args.seed)?;
            serde_json::json!({
                "source": "oracle",
                "dgp": dgp,
                "n_eval": args.n_eval,
                "seed": args.seed,
                "oracle_welfare": value,
            })
        }
        _ => bail!("evaluate needs exactly one of --data or --dgp"),
    };
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_export_milp(args: ExportMilpArgs) -> Result<()> {
    let demean = match args.demean.as_deref() {
        Some(s) => parse_demean(s)?,
        None => true,
    };
    let prepared = prepare(
        &args.data,
        args.gamma.as_deref(),
        args.propensity.as_deref(),
        demean,
        args.budget.as_deref(),
        args.alpha,
        args.delta.unwrap_or(0.05),
    )?;
    let model = match args.method.as_str() {
        "simultaneous" => {
            if args.dtr.is_some() {
                bail!("--dtr only applies to the backward export");
            }
            let kind = parse_constraint(args.constraint.as_deref().unwrap_or("none"))?;
            build_simultaneous_milp(
                &prepared.ds,
                &prepared.pm,
                &prepared.weights,
                prepared.budget.as_ref(),
                kind,
            )?
        }
        "backward" => {
            if prepared.budget.is_some() {
                bail!("the backward export has no budget rows; drop --budget");
            }
            if args.constraint.as_deref().is_some_and(|c| c != "none") {
                bail!("the backward export has no intertemporal rows; drop --constraint");
            }
            let g2 = match (&args.dtr, args.step) {
                (Some(path), 2) => {
                    let fitted = load_dtr(path)?;
                    Some(
                        fitted
                            .rules
                            .get(1)
                            .cloned()
                            .ok_or_else(|| anyhow!("{} has no stage-2 rule", path.display()))?,
                    )
                }
                (None, 2) => bail!("--step 2 needs --dtr with the fitted stage-2 rule"),
                (Some(_), _) => bail!("--dtr only applies to --step 2"),
                (None, _) => None,
            };
            build_backward_milp(
                &prepared.ds,
                &prepared.pm,
                &prepared.weights,
                args.step,
                g2.as_ref(),
            )?
        }
        other => bail!("--method must be backward|simultaneous for export, got {other:?}"),
    };
    std::fs::write(&args.out, write_lp(&model))
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} with {} variables and {} rows",
        args.out.display(),
        model.variables.len(),
        model.rows.len()
    );
    Ok(())
}

fn cmd_replicate(args: ReplicateArgs) -> Result<()> {
    configure_threads(args.threads)?;
    if args.reps == 0 {
        bail!("--reps must be at least 1");
    }
    let report = replicate_table1(args.reps, args.n_eval, args.seed)?;
    print!("{}", dewm_core::format_table(&report));
    if let Some(path) = &args.out {
        write_replication_csv(&report, path)?;
        println!("per-replication values written to {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_strings_parse() {
        assert_eq!(parse_gamma("0,1").unwrap(), vec![0.0, 1.0]);
        assert_eq!(parse_gamma("0.5, 0.25 ,1").unwrap(), vec![0.5, 0.25, 1.0]);
        assert!(parse_gamma("a,b").is_err());
        assert_eq!(terminal_gamma(3), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn class_strings_parse() {
        let spec = parse_class("linear:0;linear:0,1*2-", 2).unwrap();
        assert_eq!(spec.stages.len(), 2);
        match &spec.stages[1] {
            StageClassSpec::Linear { features, signs } => {
                assert_eq!(
                    features,
                    &vec![FeatureRef::Single(0), FeatureRef::Product(1, 2)]
                );
                assert_eq!(
                    signs,
                    &vec![
                        SignConstraint::Free,
                        SignConstraint::Free,
                        SignConstraint::NonPositive
                    ]
                );
            }
            other => panic!("unexpected stage class {other:?}"),
        }
        let consts = parse_class("const;const", 2).unwrap();
        assert!(matches!(consts.stages[0], StageClassSpec::Constants));
        assert!(parse_class("const", 2).is_err());
        assert!(parse_class("quadratic:0;const", 2).is_err());
    }

    #[test]
    fn sign_suffixes_parse() {
        let (f, s) = parse_feature("3+").unwrap();
        assert_eq!(f, FeatureRef::Single(3));
        assert_eq!(s, SignConstraint::NonNegative);
        let (f, s) = parse_feature("0*2").unwrap();
        assert_eq!(f, FeatureRef::Product(0, 2));
        assert_eq!(s, SignConstraint::Free);
    }

    #[test]
    fn budget_tokens_parse() {
        let rows = parse_budget(&["K=0.5,0.5".into(), "C=0.3".into()], 2).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].k, vec![0.5, 0.5]);
        assert_eq!(rows[0].c, 0.3);
        let two = parse_budget(
            &[
                "K=1,0".into(),
                "C=0.2".into(),
                "K=0,1".into(),
                "C=0.4".into(),
            ],
            2,
        )
        .unwrap();
        assert_eq!(two.len(), 2);
        assert!(parse_budget(&["K=0.5".into(), "C=0.3".into()], 2).is_err());
        assert!(parse_budget(&["0.5,0.5".into(), "C=0.3".into()], 2).is_err());
    }

    #[test]
    fn constraint_and_demean_parse() {
        assert_eq!(
            parse_constraint("oneshot").unwrap(),
            IntertemporalKind::OneShot
        );
        assert_eq!(
            parse_constraint("start").unwrap(),
            IntertemporalKind::StartTime
        );
        assert_eq!(
            parse_constraint("stop").unwrap(),
            IntertemporalKind::StopTime
        );
        assert!(parse_constraint("always").is_err());
        assert!(parse_demean("on").unwrap());
        assert!(!parse_demean("off").unwrap());
        assert!(parse_demean("maybe").is_err());
    }

    #[test]
    fn config_defaults_yield_to_flags() {
        let map: HashMap<String, serde_json::Value> = serde_json::from_str(
            r#"{"method": "backward", "gamma": "0,1", "seed": 7, "delta": 0.1}"#,
        )
        .map(|v: serde_json::Value| match v {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        })
        .unwrap();
        let mut opts = EstimationOpts {
            gamma: Some("1,1".into()),
            ..Default::default()
        };
        let mut method = None;
        apply_config(&mut opts, &mut method, &map).unwrap();
        assert_eq!(method.as_deref(), Some("backward"));
        assert_eq!(opts.gamma.as_deref(), Some("1,1"));
        assert_eq!(opts.seed, Some(7));
        assert_eq!(opts.delta, Some(0.1));
        let bad: HashMap<String, serde_json::Value> =
            [("mystery".to_string(), serde_json::json!("x"))].into();
        assert!(apply_config(&mut opts, &mut method, &bad).is_err());
    }

    #[test]
    fn dgp_names_parse() {
        assert_eq!(parse_dgp("1").unwrap().id, dewm_core::DgpId::Dgp1);
        assert_eq!(parse_dgp("remark1").unwrap().id, dewm_core::DgpId::Remark1);
        assert!(parse_dgp("4").is_err());
    }

    #[test]
    fn cli_shape_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
