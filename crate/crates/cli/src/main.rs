//! `nodeadj`: gradient verification, adjoint comparison, checkpoint
//! benchmarks, convergence studies and Robertson training.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use nodeadj::data::{denormalize, minmax_normalize};
use nodeadj::gradcheck::{verify_gradient, GradCheckConfig};
use nodeadj::nn::Activation;
use nodeadj::study::{bench_row, monotone_counts, one_step_discrepancy, order_study, DiscrepancyProblem};
use nodeadj::train::{robertson_problem, train, RobertsonConfig};
use nodeadj::{CheckpointPolicy, Counters, Error, Scheme};

const EXIT_USAGE: u8 = 2;
const EXIT_ASSERTION: u8 = 3;
const EXIT_SOLVER: u8 = 4;

#[derive(Parser)]
#[command(name = "nodeadj", version, about = "Discrete-adjoint neural ODE toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random draw.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with configuration values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output path (file or directory, depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the run record as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Compare adjoint gradients with central finite differences.
    VerifyGrad(VerifyGradArgs),
    /// Local discrepancy between continuous and discrete adjoints.
    CompareAdjoint(CompareArgs),
    /// Closed-form vs dynamic-programming recomputation counts.
    CheckpointBench(BenchArgs),
    /// Empirical convergence orders on u' = u.
    OrderStudy(OrderArgs),
    /// Train a neural ODE on Robertson's equations.
    Fit(FitArgs),
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> Result<CheckpointPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    Activation::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct VerifyGradArgs {
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    dim: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    width: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    #[arg(long)]
    fd_eps: Option<f64>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<CheckpointPolicy>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CompareConfig {
    scheme: Scheme,
    problem: DiscrepancyProblem,
    h: Vec<f64>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Euler,
            problem: DiscrepancyProblem::Quadratic,
            h: vec![1e-1, 1e-2, 1e-3, 1e-4],
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    /// `linear` or `quadratic`.
    #[arg(long)]
    problem: Option<String>,
    /// Step sizes; each is also evaluated at half its value.
    #[arg(long, value_delimiter = ',')]
    h: Option<Vec<f64>>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BenchConfig {
    nt_max: usize,
    nc_max: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { nt_max: 60, nc_max: 20 }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    nt_max: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    nc_max: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct OrderConfig {
    problem: String,
    schemes: Vec<Scheme>,
    steps: Vec<usize>,
    tolerance: f64,
}

impl Default for OrderConfig {
    fn default() -> Self {
        Self {
            problem: "exp".into(),
            schemes: Scheme::ALL.to_vec(),
            steps: vec![40, 80, 160],
            tolerance: 0.2,
        }
    }
}

#[derive(Args)]
struct OrderArgs {
    /// Only `exp` (u' = u on [0, 1]).
    #[arg(long)]
    problem: Option<String>,
    /// `all` or a comma-separated list of scheme names.
    #[arg(long)]
    schemes: Option<String>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct FitArgs {
    /// Only `robertson`.
    #[arg(default_value = "robertson")]
    problem: String,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    width: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    steps_per_interval: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<CheckpointPolicy>,
    /// Print progress to stderr every this many epochs (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Serialize)]
struct RunRecord {
    command: &'static str,
    argv: Vec<String>,
    config: Value,
    seed: Option<u64>,
    status: &'static str,
    counters: Option<Counters>,
    metrics: Value,
    outputs: Vec<String>,
    wall_time_seconds: f64,
}

enum Failure {
    Usage(String),
    Solver(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_)
            | Error::UnknownScheme(_)
            | Error::UnknownPolicy(_)
            | Error::DimensionMismatch { .. }
            | Error::Unsupported(_)
            | Error::Json(_)
            | Error::Io(_) => Failure::Usage(e.to_string()),
            other => Failure::Solver(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

/// Default configuration overlaid with the optional JSON file.
fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, Failure> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<String, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(path.display().to_string())
}

struct Outcome {
    record: RunRecord,
    summary: Vec<String>,
    passed: bool,
}

fn verify_grad(a: VerifyGradArgs) -> Result<Outcome, Failure> {
    let mut cfg: GradCheckConfig = load_config(a.common.config.as_deref())?;
    if let Some(v) = a.scheme {
        cfg.scheme = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v as usize;
    }
    if let Some(v) = a.dim {
        cfg.dim = v as usize;
    }
    if let Some(v) = a.width {
        cfg.width = v as usize;
    }
    if let Some(v) = a.depth {
        cfg.depth = v;
    }
    if let Some(v) = a.activation {
        cfg.activation = v;
    }
    if let Some(v) = a.fd_eps {
        cfg.fd_eps = v;
    }
    if let Some(v) = a.policy {
        cfg.policy = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    let report = verify_gradient(&cfg)?;
    let passed = report.max_relative_error <= a.tolerance;
    let mut outputs = Vec::new();
    if let Some(out) = &a.common.out {
        outputs.push(write_file(out, &serde_json::to_string_pretty(&report)?)?);
    }
    let summary = vec![format!(
        "{} steps={} seed={} params={} max_rel_err={:.3e} mean_rel_err={:.3e} {}",
        report.scheme,
        report.steps,
        report.seed,
        report.components.len(),
        report.max_relative_error,
        report.mean_relative_error,
        if passed { "PASS" } else { "FAIL" }
    )];
    Ok(Outcome {
        record: RunRecord {
            command: "verify-grad",
            argv: Vec::new(),
            config: serde_json::to_value(&cfg)?,
            seed: Some(cfg.seed),
            status: if passed { "pass" } else { "fail" },
            counters: Some(report.counters),
            metrics: json!({
                "max_relative_error": report.max_relative_error,
                "mean_relative_error": report.mean_relative_error,
                "loss": report.loss,
                "tolerance": a.tolerance,
            }),
            outputs,
            wall_time_seconds: 0.0,
        },
        summary,
        passed,
    })
}

fn compare_adjoint(a: CompareArgs) -> Result<Outcome, Failure> {
    let mut cfg: CompareConfig = load_config(a.common.config.as_deref())?;
    if let Some(v) = a.scheme {
        cfg.scheme = v;
    }
    if let Some(p) = &a.problem {
        cfg.problem = p.parse()?;
    }
    if let Some(h) = a.h {
        cfg.h = h;
    }
    if cfg.h.is_empty() || cfg.h.iter().any(|h| h.is_nan() || *h <= 0.0) {
        return Err(Failure::Usage("step sizes must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut summary = vec!["h,discrepancy,discrepancy_half,ratio,order".to_string()];
    let mut passed = true;
    let mut prev: Option<f64> = None;
    let mut monotone = true;
    for &h in &cfg.h {
        let d = one_step_discrepancy(cfg.problem, cfg.scheme, h)?;
        let d_half = one_step_discrepancy(cfg.problem, cfg.scheme, h / 2.0)?;
        let ratio = d / d_half;
        let order = ratio.log2();
        match cfg.problem {
            DiscrepancyProblem::Linear if cfg.scheme == Scheme::Euler => passed &= d <= 1e-14 && d_half <= 1e-14,
            DiscrepancyProblem::Linear => {}
            DiscrepancyProblem::Quadratic => passed &= (3.5..=4.5).contains(&ratio),
        }
        if let Some(p) = prev {
            monotone &= d <= p;
        }
        prev = Some(d);
        summary.push(format!("{h:e},{d:e},{d_half:e},{ratio},{order}"));
        rows.push(json!({"h": h, "discrepancy": d, "discrepancy_half": d_half, "ratio": ratio, "order": order}));
    }
    let mut outputs = Vec::new();
    if let Some(out) = &a.common.out {
        outputs.push(write_file(out, &(summary.join("\n") + "\n"))?);
    }
    summary.push(format!("monotone={monotone} {}", if passed { "PASS" } else { "FAIL" }));
    Ok(Outcome {
        record: RunRecord {
            command: "compare-adjoint",
            argv: Vec::new(),
            config: serde_json::to_value(&cfg)?,
            seed: a.common.seed,
            status: if passed { "pass" } else { "fail" },
            counters: None,
            metrics: json!({"rows": rows, "monotone": monotone}),
            outputs,
            wall_time_seconds: 0.0,
        },
        summary,
        passed,
    })
}

fn checkpoint_bench(a: BenchArgs) -> Result<Outcome, Failure> {
    let mut cfg: BenchConfig = load_config(a.common.config.as_deref())?;
    if let Some(v) = a.nt_max {
        cfg.nt_max = v as usize;
    }
    if let Some(v) = a.nc_max {
        cfg.nc_max = v as usize;
    }
    if cfg.nt_max == 0 || cfg.nc_max == 0 {
        return Err(Failure::Usage("nt-max and nc-max must be at least 1".into()));
    }
    let mut csv = String::from("nt,nc,p_tilde,dp_count,max_slots,recomputed_steps\n");
    let mut mismatches = 0usize;
    let mut rows = 0usize;
    for nt in 1..=cfg.nt_max {
        for nc in 1..=cfg.nc_max {
            let r = bench_row(nt, nc)?;
            if !r.consistent() {
                mismatches += 1;
            }
            rows += 1;
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.nt, r.nc, r.p_tilde, r.dp_count, r.max_slots, r.recomputed_steps
            ));
        }
    }
    let monotone = monotone_counts(cfg.nt_max, cfg.nc_max);
    let passed = mismatches == 0 && monotone;
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    match &a.common.out {
        Some(out) => outputs.push(write_file(out, &csv)?),
        None if !a.common.json => summary.push(csv.trim_end().to_string()),
        None => {}
    }
    summary.push(format!(
        "rows={rows} mismatches={mismatches} monotone={monotone} (slots hold full step records) {}",
        if passed { "PASS" } else { "FAIL" }
    ));
    Ok(Outcome {
        record: RunRecord {
            command: "checkpoint-bench",
            argv: Vec::new(),
            config: serde_json::to_value(&cfg)?,
            seed: a.common.seed,
            status: if passed { "pass" } else { "fail" },
            counters: None,
            metrics: json!({"rows": rows, "mismatches": mismatches, "monotone": monotone}),
            outputs,
            wall_time_seconds: 0.0,
        },
        summary,
        passed,
    })
}

fn order_study_cmd(a: OrderArgs) -> Result<Outcome, Failure> {
    let mut cfg: OrderConfig = load_config(a.common.config.as_deref())?;
    if let Some(p) = a.problem {
        cfg.problem = p;
    }
    if let Some(s) = a.schemes {
        cfg.schemes = if s == "all" {
            Scheme::ALL.to_vec()
        } else {
            s.split(',').map(|x| x.trim().parse()).collect::<Result<_, Error>>()?
        };
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if cfg.problem != "exp" {
        return Err(Failure::Usage(format!("unknown problem '{}'", cfg.problem)));
    }
    if cfg.steps.len() < 2 || cfg.steps.contains(&0) {
        return Err(Failure::Usage("need at least two positive step counts".into()));
    }
    let mut csv = String::from("scheme,steps,error,observed_order,nominal_order\n");
    let mut passed = true;
    let mut fitted = serde_json::Map::new();
    for &scheme in &cfg.schemes {
        let rows = order_study(scheme, &cfg.steps)?;
        let nominal = scheme.order() as f64;
        for r in &rows {
            csv.push_str(&format!(
                "{},{},{:e},{},{}\n",
                scheme,
                r.steps,
                r.error,
                r.observed_order.map_or(String::new(), |o| o.to_string()),
                nominal
            ));
            if let Some(o) = r.observed_order {
                passed &= (o - nominal).abs() <= cfg.tolerance;
            }
        }
        let last = rows.last().and_then(|r| r.observed_order);
        fitted.insert(scheme.to_string(), json!(last));
    }
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    match &a.common.out {
        Some(out) => outputs.push(write_file(out, &csv)?),
        None => summary.push(csv.trim_end().to_string()),
    }
    summary.push(if passed { "PASS".into() } else { "FAIL".into() });
    Ok(Outcome {
        record: RunRecord {
            command: "order-study",
            argv: Vec::new(),
            config: serde_json::to_value(&cfg)?,
            seed: a.common.seed,
            status: if passed { "pass" } else { "fail" },
            counters: None,
            metrics: json!({"observed_order": fitted}),
            outputs,
            wall_time_seconds: 0.0,
        },
        summary,
        passed,
    })
}

fn fit(a: FitArgs) -> Result<Outcome, Failure> {
    if a.problem != "robertson" {
        return Err(Failure::Usage(format!("unknown problem '{}'", a.problem)));
    }
    let mut cfg: RobertsonConfig = load_config(a.common.config.as_deref())?;
    if let Some(v) = a.scheme {
        cfg.scheme = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.optimizer.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.train.optimizer.weight_decay = v;
    }
    if let Some(v) = a.width {
        cfg.width = v as usize;
    }
    if let Some(v) = a.depth {
        cfg.depth = v;
    }
    if let Some(v) = a.steps_per_interval {
        cfg.steps_per_interval = v as usize;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = v;
    }
    if let Some(v) = a.policy {
        cfg.train.policy = v;
    }
    if let Some(v) = a.common.seed {
        cfg.seed = v;
    }
    let problem = robertson_problem(&cfg)?;
    let log_every = a.log_every;
    let (model, record) = train(
        problem.model.clone(),
        &problem.integrator,
        &problem.loss,
        &problem.u0,
        problem.t0,
        &cfg.train,
        |e| {
            if log_every > 0 && e.epoch % log_every == 0 {
                eprintln!(
                    "epoch {:>5} loss {:.6e} |grad| {:.3e} nfe_f {} nfe_b {}",
                    e.epoch, e.loss, e.grad_norm, e.nfe_f, e.nfe_b
                );
            }
        },
    )?;

    let mut outputs = Vec::new();
    if let Some(dir) = &a.common.out {
        fs::create_dir_all(dir)?;
        let raw = denormalize(&problem.dataset);
        let mut buf = Vec::new();
        raw.write_csv(&mut buf)?;
        outputs.push(write_file(&dir.join("dataset.csv"), &String::from_utf8_lossy(&buf))?);
        let mut buf = Vec::new();
        minmax_normalize(&raw).write_csv(&mut buf)?;
        outputs.push(write_file(&dir.join("dataset_scaled.csv"), &String::from_utf8_lossy(&buf))?);
        let model_path = write_file(&dir.join("model.json"), &model.to_json()?)?;
        outputs.push(model_path.clone());
        let training = json!({
            "config": cfg,
            "initial_loss": record.initial_loss,
            "final_loss": record.final_loss,
            "explosion_epoch": record.explosion_epoch,
            "failure": record.failure,
            "model": model_path,
            "epochs": {
                "epoch": record.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>(),
                "loss": record.epochs.iter().map(|e| e.loss).collect::<Vec<_>>(),
                "grad_norm": record.epochs.iter().map(|e| e.grad_norm).collect::<Vec<_>>(),
                "nfe_f": record.epochs.iter().map(|e| e.nfe_f).collect::<Vec<_>>(),
                "nfe_b": record.epochs.iter().map(|e| e.nfe_b).collect::<Vec<_>>(),
                "steps": record.epochs.iter().map(|e| e.steps).collect::<Vec<_>>(),
                "seconds": record.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>(),
            },
        });
        outputs.push(write_file(&dir.join("training.json"), &serde_json::to_string_pretty(&training)?)?);
    }

    let first_nfe = record.epochs.iter().take(100).map(|e| e.nfe_f).max().unwrap_or(0);
    let peak_nfe = record.epochs.iter().map(|e| e.nfe_f).max().unwrap_or(0);
    let summary = vec![format!(
        "{} epochs={} initial_loss={:.6e} final_loss={} explosion_epoch={} failure={} nfe_f first100_max={} peak={}",
        cfg.scheme,
        record.epochs.len(),
        record.initial_loss,
        record.final_loss.map_or("n/a".into(), |l| format!("{l:.6e}")),
        record.explosion_epoch.map_or("none".into(), |e| e.to_string()),
        record.failure.as_deref().unwrap_or("none"),
        first_nfe,
        peak_nfe,
    )];
    Ok(Outcome {
        record: RunRecord {
            command: "fit",
            argv: Vec::new(),
            config: serde_json::to_value(cfg)?,
            seed: Some(cfg.seed),
            status: "ok",
            counters: None,
            metrics: json!({
                "initial_loss": record.initial_loss,
                "final_loss": record.final_loss,
                "epochs_completed": record.epochs.len(),
                "explosion_epoch": record.explosion_epoch,
                "failure": record.failure,
                "all_gradients_finite": record.all_gradients_finite(),
                "nfe_f_first100_max": first_nfe,
                "nfe_f_peak": peak_nfe,
            }),
            outputs,
            wall_time_seconds: 0.0,
        },
        summary,
        passed: true,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let json_out = match &cli.command {
        Command::VerifyGrad(a) => a.common.json,
        Command::CompareAdjoint(a) => a.common.json,
        Command::CheckpointBench(a) => a.common.json,
        Command::OrderStudy(a) => a.common.json,
        Command::Fit(a) => a.common.json,
    };
    let result = match cli.command {
        Command::VerifyGrad(a) => verify_grad(a),
        Command::CompareAdjoint(a) => compare_adjoint(a),
        Command::CheckpointBench(a) => checkpoint_bench(a),
        Command::OrderStudy(a) => order_study_cmd(a),
        Command::Fit(a) => fit(a),
    };
    match result {
        Ok(mut outcome) => {
            outcome.record.argv = std::env::args().collect();
            outcome.record.wall_time_seconds = start.elapsed().as_secs_f64();
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            if json_out {
                let _ = writeln!(
                    lock,
                    "{}",
                    serde_json::to_string_pretty(&outcome.record).expect("run record serializes")
                );
            } else {
                for line in &outcome.summary {
                    let _ = writeln!(lock, "{line}");
                }
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_ASSERTION)
            }
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(EXIT_SOLVER)
        }
    }
}
