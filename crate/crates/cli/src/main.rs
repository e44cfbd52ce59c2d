//! Command-line workbench: run built-in or user-supplied experiments, sweep
//! excitation over the searched-parameter box, estimate the constants that
//! enter the admissible search-speed bound, and emit plot-ready CSV/JSON.
//!
//! Exit codes: 0 success, 1 internal or I/O failure, 2 configuration or usage
//! error, 3 divergence during integration, 4 negative excitation verdict,
//! 5 a required bound constant could not be estimated.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use adobs_core::bounds::{
    cascade_bounds, default_d_grid, default_psi_grid, delta_total, estimate_derivative_bound,
    estimate_error_system_envelope, estimate_regressor_constants, estimate_torus_constants,
    gamma_star, ltv_residual_bound, theta_error_bound, BoundInputs,
};
use adobs_core::excitation::{check_lambda_upe, check_nonlinear_pe, lambda_grid_1d, product_grid};
use adobs_core::experiments::{
    builtin, builtin_names, regressor_series, upsilon_series, Experiment, ExperimentConfig,
    ExperimentError,
};
use adobs_core::observer::{ExperimentResult, ObserverError};
use adobs_core::plant::PlantSpec;

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "adobs",
    version,
    about = "Run adaptive-observer experiments, excitation checks, and bound estimates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop experiment; writes trajectory.csv, summary.json, manifest.json.
    Run(RunArgs),
    /// Sample the open-loop regressor over a parameter grid and test excitation.
    CheckPe(CheckPeArgs),
    /// Estimate the constants entering the search-speed bound and evaluate it.
    Bounds(BoundsArgs),
    /// List built-in experiments; optionally write their config files.
    ListExamples(ListExamplesArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Built-in experiment name (see list-examples) or path to a config file.
    config: String,
    /// Output directory. Default: $ADOBS_OUT/<name>, else runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into an existing non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Recorded in the manifest; reserved for configs with stochastic inputs.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CheckPeArgs {
    /// Built-in experiment name or path to a config file.
    config: String,
    /// Output directory for pe_report.json. Default: $ADOBS_OUT/<name>, else runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Excitation window length.
    #[arg(long, default_value_t = 500.0)]
    l: f64,
    /// Open-loop sampling horizon.
    #[arg(long, default_value_t = 1200.0)]
    t_end: f64,
    /// Keep every stride-th integration step in the sampled series.
    #[arg(long, default_value_t = 25)]
    stride: usize,
    /// Grid points per searched-parameter axis (default: 21 for one axis, 5 otherwise).
    #[arg(long)]
    grid: Option<usize>,
    /// Threshold the uniform excitation level is compared against.
    #[arg(long, default_value_t = 1e-6)]
    mu_threshold: f64,
    /// Output-distance tolerance below which two parameter values are merged.
    #[arg(long, default_value_t = 1e-6)]
    class_tol: f64,
}

#[derive(Args)]
struct BoundsArgs {
    /// Built-in experiment name or path to a config file.
    config: String,
    /// Output directory for bounds.json. Default: $ADOBS_OUT/<name>, else runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Excitation window length for the mu estimate.
    #[arg(long, default_value_t = 500.0)]
    l: f64,
    /// Open-loop sampling horizon for constant estimation.
    #[arg(long, default_value_t = 1200.0)]
    t_end: f64,
    /// Keep every stride-th integration step in the sampled series.
    #[arg(long, default_value_t = 25)]
    stride: usize,
    /// Grid points per searched-parameter axis (default: 11 for one axis, 3 otherwise).
    #[arg(long)]
    grid: Option<usize>,
    /// Skip the excitation sweep. The bound needs mu, so this exits with
    /// status 5; useful as a scripting guard.
    #[arg(long)]
    no_pe: bool,
}

#[derive(Args)]
struct ListExamplesArgs {
    /// Write each built-in config to this directory as <name>.ini.
    #[arg(long)]
    emit: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Exit-code plumbing
// ---------------------------------------------------------------------------

const EXIT_INTERNAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_NOT_PE: u8 = 4;
const EXIT_NO_CONSTANT: u8 = 5;

struct Failure {
    code: u8,
    source: anyhow::Error,
}

impl Failure {
    fn new(code: u8, source: anyhow::Error) -> Self {
        Failure { code, source }
    }
}

trait OrCode<T> {
    fn or_code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrCode<T> for Result<T, E> {
    fn or_code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e.into()))
    }
}

/// Closed-loop failures: bad observer wiring is a config error, anything that
/// blew up mid-integration is divergence.
fn observer_failure(e: ObserverError) -> Failure {
    let code = match &e {
        ObserverError::Config(_) => EXIT_CONFIG,
        _ => EXIT_DIVERGED,
    };
    Failure::new(code, e.into())
}

/// Open-loop sampling failures, same split.
fn sampling_failure(e: ExperimentError) -> Failure {
    let code = match &e {
        ExperimentError::Parse { .. } | ExperimentError::Field { .. } => EXIT_CONFIG,
        _ => EXIT_DIVERGED,
    };
    Failure::new(code, e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::CheckPe(args) => cmd_check_pe(&args),
        Command::Bounds(args) => cmd_bounds(&args),
        Command::ListExamples(args) => cmd_list_examples(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.source);
            ExitCode::from(f.code)
        }
    }
}

// ---------------------------------------------------------------------------
// Config resolution and artifact plumbing
// ---------------------------------------------------------------------------

/// A name hits the built-in table first; anything else is read as a file.
fn load_config(source: &str) -> Result<(ExperimentConfig, String), Failure> {
    if let Some(cfg) = builtin(source) {
        return Ok((cfg, format!("builtin:{source}")));
    }
    let text = fs::read_to_string(source)
        .map_err(|e| Failure::new(EXIT_CONFIG, anyhow!("reading config `{source}`: {e}")))?;
    let cfg = ExperimentConfig::parse(&text)
        .map_err(|e| Failure::new(EXIT_CONFIG, anyhow!("{source}: {e}")))?;
    Ok((cfg, source.to_string()))
}

/// `--out`, else `$ADOBS_OUT/<name>`, else `runs/<name>`.
fn resolve_out(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        std::env::var_os("ADOBS_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name)
    })
}

/// Existing non-empty directories need --force so a stray rerun cannot
/// silently clobber results.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Failure::new(
                EXIT_CONFIG,
                anyhow!("output path `{}` exists and is not a directory", dir.display()),
            ));
        }
        let occupied = fs::read_dir(dir).or_code(EXIT_INTERNAL)?.next().is_some();
        if occupied && !force {
            return Err(Failure::new(
                EXIT_CONFIG,
                anyhow!(
                    "output directory `{}` is not empty; pass --force to overwrite",
                    dir.display()
                ),
            ));
        }
        return Ok(());
    }
    fs::create_dir_all(dir)
        .map_err(|e| Failure::new(EXIT_INTERNAL, anyhow!("creating `{}`: {e}", dir.display())))
}

/// Stage to a sibling temp file and rename so readers never see a torn file.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    write_atomic(path, bytes)
        .map_err(|e| Failure::new(EXIT_INTERNAL, anyhow!("writing `{}`: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).or_code(EXIT_INTERNAL)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn unix_time_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `n` evenly spaced points across `[lo, hi]`; the midpoint when `n == 1`.
fn axis_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Grid over the searched-parameter box with `per_axis` points per axis.
fn box_grid(boxes: &[(f64, f64)], per_axis: usize) -> Vec<Vec<f64>> {
    if boxes.len() == 1 && per_axis > 1 {
        return lambda_grid_1d(boxes[0].0, boxes[0].1, per_axis);
    }
    let axes: Vec<Vec<f64>> =
        boxes.iter().map(|&(lo, hi)| axis_points(lo, hi, per_axis)).collect();
    product_grid(&axes)
}

fn fmt_vec(v: &[f64]) -> String {
    let mut s = String::from("[");
    for (k, x) in v.iter().enumerate() {
        if k > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{x:.6}");
    }
    s.push(']');
    s
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, source) = load_config(&args.config)?;
    let exp = cfg.build().or_code(EXIT_CONFIG)?;
    let out = resolve_out(args.out.clone(), &cfg.name);
    prepare_out_dir(&out, args.force)?;

    let wall = Instant::now();
    let result = exp.run().map_err(observer_failure)?;
    let wall_ms = wall.elapsed().as_millis() as u64;

    let csv = render_trajectory_csv(&exp, &result);
    write_bytes(&out.join("trajectory.csv"), csv.as_bytes())?;

    let summary = build_summary(&cfg, &exp, &result);
    let summary_value = serde_json::to_value(&summary).or_code(EXIT_INTERNAL)?;
    check_summary_schema(&summary_value).or_code(EXIT_INTERNAL)?;
    write_json(&out.join("summary.json"), &summary_value)?;
    write_bytes(&out.join("summary.schema.json"), SUMMARY_SCHEMA.as_bytes())?;

    let manifest = json!({
        "config": source,
        "out_dir": out.display().to_string(),
        "seed": args.seed,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "unix_time_s": unix_time_s(),
        "wall_ms": wall_ms,
    });
    write_json(&out.join("manifest.json"), &manifest)?;

    let tail = &result.tail;
    println!(
        "{}: {} records over t in [0, {}], {} ms",
        cfg.name,
        result.trajectory.times.len(),
        cfg.grid.t_end,
        wall_ms
    );
    println!(
        "  theta_hat {}  (true {})",
        fmt_vec(&tail.theta_terminal),
        fmt_vec(exp.spec.theta_true())
    );
    println!(
        "  lambda_hat {}  (true {})",
        fmt_vec(&tail.lambda_terminal),
        fmt_vec(exp.spec.lambda_true())
    );
    println!(
        "  tail from t = {}: mean dead-zoned error {:.3e}, search total variation {}",
        tail.start_time,
        tail.e_deadzone_mean,
        fmt_vec(&tail.lambda_total_variation)
    );
    for note in &summary.advisories {
        println!("  advisory: {note}");
    }
    println!("  wrote trajectory.csv, summary.json, manifest.json under {}", out.display());
    Ok(())
}

/// RFC-4180 table: header row, CRLF separators, one row per record. The last
/// two columns reconstruct the example's physical quantity of interest from
/// the first filtered channel.
fn render_trajectory_csv(exp: &Experiment, result: &ExperimentResult) -> String {
    let traj = &result.trajectory;
    let d = exp.spec.theta_true().len();
    let s = exp.spec.lambda_true().len();
    let (label_true, label_hat) = exp.recon.labels();

    let mut out = String::with_capacity(traj.times.len() * 64 + 128);
    out.push_str("t,x0,x0_hat");
    for j in 1..=d {
        let _ = write!(out, ",theta_hat_{j}");
    }
    for j in 1..=s {
        let _ = write!(out, ",lambda_hat_{j}");
    }
    let _ = write!(out, ",e_deadzone,{label_true},{label_hat}\r\n");

    for i in 0..traj.times.len() {
        let _ = write!(out, "{},{},{}", traj.times[i], traj.x0[i], traj.x0_hat[i]);
        for v in &traj.theta_hat[i] {
            let _ = write!(out, ",{v}");
        }
        for v in &traj.lambda_hat[i] {
            let _ = write!(out, ",{v}");
        }
        let (recon_true, recon_hat) = exp.recon.pair(
            traj.x0[i],
            traj.plant_filtered[i][0],
            traj.reconstructed[i][0],
            &traj.theta_hat[i],
            exp.spec.theta_true(),
        );
        let _ = write!(out, ",{},{},{}\r\n", traj.e_deadzone[i], recon_true, recon_hat);
    }
    out
}

// ---------------------------------------------------------------------------
// summary.json
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Summary {
    experiment: String,
    grid: GridSummary,
    terminal: TerminalSummary,
    convergence: ConvergenceSummary,
    tail: TailSummary,
    approximation: ApproxSummary,
    run: RunSummary,
    advisories: Vec<String>,
}

#[derive(Serialize)]
struct GridSummary {
    t_end: f64,
    dt: f64,
    steps: usize,
    records: usize,
    decimation: usize,
}

#[derive(Serialize)]
struct TerminalSummary {
    theta_hat: Vec<f64>,
    theta_true: Vec<f64>,
    theta_rel_error: Vec<f64>,
    theta_error_norm: f64,
    lambda_hat: Vec<f64>,
    lambda_true: Vec<f64>,
    lambda_rel_error: Vec<f64>,
}

#[derive(Serialize)]
struct ConvergenceSummary {
    band_percent: f64,
    theta_within_5pct: Option<f64>,
    theta_within_10pct: Option<f64>,
    lambda_within_10pct: Option<f64>,
}

#[derive(Serialize)]
struct TailSummary {
    start_time: f64,
    e_deadzone_mean: f64,
    lambda_total_variation: Vec<f64>,
}

#[derive(Serialize)]
struct ApproxSummary {
    truncation_bound: f64,
    quadrature_error: f64,
    delta_phi: f64,
    delta_xi: f64,
    delta_total: f64,
}

#[derive(Serialize)]
struct RunSummary {
    warm_up_steps: usize,
    max_torus_drift: f64,
}

/// Componentwise `|hat - true| / |true|`, absolute where the truth is zero.
fn rel_errors(hat: &[f64], truth: &[f64]) -> Vec<f64> {
    hat.iter()
        .zip(truth)
        .map(|(&h, &t)| if t != 0.0 { ((h - t) / t).abs() } else { h.abs() })
        .collect()
}

fn build_summary(cfg: &ExperimentConfig, exp: &Experiment, result: &ExperimentResult) -> Summary {
    let tail = &result.tail;
    let diag = &result.diagnostics;
    let conv = &result.convergence;

    let mut advisories = Vec::new();
    if tail.e_deadzone_mean > 1e-3 {
        advisories.push(format!(
            "mean dead-zoned output error {:.3e} over the tail is above 1e-3; estimates may still be converging",
            tail.e_deadzone_mean
        ));
    }
    for (j, &tv) in tail.lambda_total_variation.iter().enumerate() {
        if tv > 1e-3 {
            advisories.push(format!(
                "searched parameter {} is still moving over the tail (total variation {:.3e})",
                j + 1,
                tv
            ));
        }
    }
    if conv.lambda_within_10pct.is_none() && !tail.lambda_terminal.is_empty() {
        advisories
            .push("searched-parameter estimate not within 10% of truth at the horizon".into());
    }
    if diag.max_torus_drift > 1e-9 {
        advisories.push(format!(
            "per-step torus drift {:.3e} is above 1e-9; the step may be too coarse for the search gains",
            diag.max_torus_drift
        ));
    }

    Summary {
        experiment: cfg.name.clone(),
        grid: GridSummary {
            t_end: cfg.grid.t_end,
            dt: cfg.grid.dt,
            steps: diag.steps,
            records: result.trajectory.times.len(),
            decimation: cfg.output.decimation,
        },
        terminal: TerminalSummary {
            theta_hat: tail.theta_terminal.clone(),
            theta_true: exp.spec.theta_true().to_vec(),
            theta_rel_error: rel_errors(&tail.theta_terminal, exp.spec.theta_true()),
            theta_error_norm: tail.theta_error_norm,
            lambda_hat: tail.lambda_terminal.clone(),
            lambda_true: exp.spec.lambda_true().to_vec(),
            lambda_rel_error: rel_errors(&tail.lambda_terminal, exp.spec.lambda_true()),
        },
        convergence: ConvergenceSummary {
            band_percent: cfg.output.band_percent,
            theta_within_5pct: conv.theta_within_5pct,
            theta_within_10pct: conv.theta_within_10pct,
            lambda_within_10pct: conv.lambda_within_10pct,
        },
        tail: TailSummary {
            start_time: tail.start_time,
            e_deadzone_mean: tail.e_deadzone_mean,
            lambda_total_variation: tail.lambda_total_variation.clone(),
        },
        approximation: ApproxSummary {
            truncation_bound: diag.truncation_bound,
            quadrature_error: diag.quadrature_error,
            delta_phi: diag.delta_phi,
            delta_xi: diag.delta_xi,
            delta_total: diag.delta_total,
        },
        run: RunSummary { warm_up_steps: diag.warm_up_steps, max_torus_drift: diag.max_torus_drift },
        advisories,
    }
}

/// Shape of summary.json, shipped next to it. Every emit is checked against
/// this description so the schema cannot drift silently.
static SUMMARY_SCHEMA: &str = r#"{
  "title": "experiment run summary",
  "type": "object",
  "required": ["experiment", "grid", "terminal", "convergence", "tail", "approximation", "run", "advisories"],
  "properties": {
    "experiment": { "type": "string" },
    "grid": {
      "type": "object",
      "required": ["t_end", "dt", "steps", "records", "decimation"],
      "properties": {
        "t_end": { "type": "number" },
        "dt": { "type": "number" },
        "steps": { "type": "number" },
        "records": { "type": "number" },
        "decimation": { "type": "number" }
      }
    },
    "terminal": {
      "type": "object",
      "required": ["theta_hat", "theta_true", "theta_rel_error", "theta_error_norm", "lambda_hat", "lambda_true", "lambda_rel_error"],
      "properties": {
        "theta_hat": { "type": "array", "items": { "type": "number" } },
        "theta_true": { "type": "array", "items": { "type": "number" } },
        "theta_rel_error": { "type": "array", "items": { "type": "number" } },
        "theta_error_norm": { "type": "number" },
        "lambda_hat": { "type": "array", "items": { "type": "number" } },
        "lambda_true": { "type": "array", "items": { "type": "number" } },
        "lambda_rel_error": { "type": "array", "items": { "type": "number" } }
      }
    },
    "convergence": {
      "type": "object",
      "required": ["band_percent", "theta_within_5pct", "theta_within_10pct", "lambda_within_10pct"],
      "properties": {
        "band_percent": { "type": "number" },
        "theta_within_5pct": { "type": ["number", "null"] },
        "theta_within_10pct": { "type": ["number", "null"] },
        "lambda_within_10pct": { "type": ["number", "null"] }
      }
    },
    "tail": {
      "type": "object",
      "required": ["start_time", "e_deadzone_mean", "lambda_total_variation"],
      "properties": {
        "start_time": { "type": "number" },
        "e_deadzone_mean": { "type": "number" },
        "lambda_total_variation": { "type": "array", "items": { "type": "number" } }
      }
    },
    "approximation": {
      "type": "object",
      "required": ["truncation_bound", "quadrature_error", "delta_phi", "delta_xi", "delta_total"],
      "properties": {
        "truncation_bound": { "type": "number" },
        "quadrature_error": { "type": "number" },
        "delta_phi": { "type": "number" },
        "delta_xi": { "type": "number" },
        "delta_total": { "type": "number" }
      }
    },
    "run": {
      "type": "object",
      "required": ["warm_up_steps", "max_torus_drift"],
      "properties": {
        "warm_up_steps": { "type": "number" },
        "max_torus_drift": { "type": "number" }
      }
    },
    "advisories": { "type": "array", "items": { "type": "string" } }
  }
}
"#;

fn check_summary_schema(value: &Value) -> anyhow::Result<()> {
    let schema: Value = serde_json::from_str(SUMMARY_SCHEMA).expect("bundled schema parses");
    check_against(&schema, value, "$")
}

/// Minimal structural validation — types, required keys, no undeclared keys —
/// enough to keep the emitted summary and the bundled description in lock
/// step.
fn check_against(schema: &Value, value: &Value, path: &str) -> anyhow::Result<()> {
    let types: Vec<&str> = match &schema["type"] {
        Value::String(s) => vec![s.as_str()],
        Value::Array(a) => a.iter().filter_map(|v| v.as_str()).collect(),
        _ => return Err(anyhow!("schema node at {path} lacks a type")),
    };
    let matched = types.iter().any(|ty| match *ty {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "number" => value.is_number(),
        "string" => value.is_string(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => false,
    });
    if !matched {
        return Err(anyhow!("summary field {path} does not match type {types:?}"));
    }
    if let (Some(props), Some(obj)) = (schema["properties"].as_object(), value.as_object()) {
        if let Some(required) = schema["required"].as_array() {
            for name in required.iter().filter_map(|v| v.as_str()) {
                if !obj.contains_key(name) {
                    return Err(anyhow!("summary field {path}.{name} is missing"));
                }
            }
        }
        for (name, sub) in obj {
            let subschema = props
                .get(name)
                .ok_or_else(|| anyhow!("summary field {path}.{name} is not in the schema"))?;
            check_against(subschema, sub, &format!("{path}.{name}"))?;
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (k, sub) in arr.iter().enumerate() {
            check_against(items, sub, &format!("{path}[{k}]"))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// check-pe
// ---------------------------------------------------------------------------

fn cmd_check_pe(args: &CheckPeArgs) -> Result<(), Failure> {
    let (cfg, source) = load_config(&args.config)?;
    let exp = cfg.build().or_code(EXIT_CONFIG)?;
    let window = cfg.regressor.window;
    if args.t_end < window + args.l {
        return Err(Failure::new(
            EXIT_CONFIG,
            anyhow!(
                "horizon --t-end {} is shorter than the regressor window {} plus the excitation window {}",
                args.t_end,
                window,
                args.l
            ),
        ));
    }

    let boxes = exp.spec.lambda_box();
    let per_axis = args.grid.unwrap_or(if boxes.len() == 1 { 21 } else { 5 });
    if per_axis == 0 {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("--grid must be at least 1")));
    }
    let grid = box_grid(boxes, per_axis);

    let series = regressor_series(
        &exp.spec,
        &exp.run.plant_init,
        grid.clone(),
        args.t_end,
        cfg.grid.dt,
        args.stride,
        window,
    )
    .map_err(sampling_failure)?;
    let pe = check_lambda_upe(&series, args.l, None, args.mu_threshold).or_code(EXIT_CONFIG)?;

    let upsilon = upsilon_series(
        &exp.spec,
        &exp.run.plant_init,
        grid.clone(),
        args.t_end,
        cfg.grid.dt,
        args.stride,
        window,
    )
    .map_err(sampling_failure)?;
    let npe = check_nonlinear_pe(&upsilon, args.l, args.class_tol).or_code(EXIT_CONFIG)?;

    let mut warnings: Vec<String> = Vec::new();
    if grid.len() == 1 {
        warnings.push(
            "grid too coarse: a single parameter sample cannot probe uniformity over the box"
                .into(),
        );
    }

    let report = json!({
        "config": source,
        "l": args.l,
        "t_end": args.t_end,
        "stride": args.stride,
        "pe": pe,
        "npe": npe,
        "warnings": warnings,
    });
    let out = resolve_out(args.out.clone(), &cfg.name);
    fs::create_dir_all(&out)
        .map_err(|e| Failure::new(EXIT_INTERNAL, anyhow!("creating `{}`: {e}", out.display())))?;
    let path = out.join("pe_report.json");
    write_json(&path, &report)?;

    println!(
        "{}: mu_uniform = {:.6e} over {} grid points, window {} (threshold {:.1e}): {}",
        cfg.name,
        pe.mu_uniform,
        grid.len(),
        args.l,
        args.mu_threshold,
        if pe.verdict { "exciting" } else { "NOT exciting" }
    );
    match npe.beta_estimate {
        Some(beta) => println!(
            "  output separation: {} indistinguishability classes, rate estimate {:.3e}",
            npe.equivalence_classes.len(),
            beta
        ),
        None => println!(
            "  output separation: {} indistinguishability classes, rate unconstrained",
            npe.equivalence_classes.len()
        ),
    }
    for w in &warnings {
        println!("  warning: {w}");
    }
    println!("  wrote {}", path.display());

    if !pe.verdict {
        return Err(Failure::new(
            EXIT_NOT_PE,
            anyhow!(
                "excitation level {:.6e} is below the threshold {:.1e}",
                pe.mu_uniform,
                args.mu_threshold
            ),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bounds
// ---------------------------------------------------------------------------

fn cmd_bounds(args: &BoundsArgs) -> Result<(), Failure> {
    if args.no_pe {
        return Err(Failure::new(
            EXIT_NO_CONSTANT,
            anyhow!("the excitation level mu is a required input; rerun without --no-pe"),
        ));
    }
    let (cfg, source) = load_config(&args.config)?;
    let exp = cfg.build().or_code(EXIT_CONFIG)?;
    let spec = &exp.spec;
    let window = cfg.regressor.window;
    let dt = cfg.grid.dt;
    if args.t_end < window + args.l {
        return Err(Failure::new(
            EXIT_CONFIG,
            anyhow!(
                "horizon --t-end {} is shorter than the regressor window {} plus the excitation window {}",
                args.t_end,
                window,
                args.l
            ),
        ));
    }

    let boxes = spec.lambda_box().to_vec();
    let per_axis = args.grid.unwrap_or(if boxes.len() == 1 { 11 } else { 3 });
    if per_axis == 0 {
        return Err(Failure::new(EXIT_CONFIG, anyhow!("--grid must be at least 1")));
    }
    let grid = box_grid(&boxes, per_axis);

    // Excitation level over the grid.
    let series = regressor_series(
        spec,
        &exp.run.plant_init,
        grid.clone(),
        args.t_end,
        dt,
        args.stride,
        window,
    )
    .map_err(sampling_failure)?;
    let pe = check_lambda_upe(&series, args.l, None, 0.0).or_code(EXIT_NO_CONSTANT)?;
    let mu = pe.mu_uniform;
    if !(mu > 0.0) {
        return Err(Failure::new(
            EXIT_NO_CONSTANT,
            anyhow!("estimated excitation level is zero: the regressor is degenerate on this grid"),
        ));
    }

    // Output trajectory, for the additive-term closure and the decay floor.
    let x0_series = simulate_x0(spec, &exp.run.plant_init, args.t_end, dt, args.stride)?;
    let n_samples = series.values[0].len();
    let series_t0 = series.t0;
    let series_dt = series.dt;
    let kt =
        move |t: f64| (((t - series_t0) / series_dt).round() as usize).min(n_samples - 1);

    // Regressor sup-norm and Lipschitz constants, sampled past warm-up.
    let k_warm = ((window / series_dt).ceil() as usize).min(n_samples - 1);
    let step = ((n_samples - k_warm) / 2000).max(1);
    let t_samples: Vec<f64> =
        (k_warm..n_samples).step_by(step).map(|k| series_t0 + k as f64 * series_dt).collect();
    let grid_ref = &grid;
    let idx_of = move |lam: &[f64]| {
        grid_ref
            .iter()
            .position(|g| g.as_slice() == lam)
            .expect("constant estimation stays on the sampling grid")
    };
    let consts = estimate_regressor_constants(
        |lam, t| series.values[idx_of(lam)][kt(t)].clone(),
        |lam, t| spec.c0_eval(x0_series[kt(t).min(x0_series.len() - 1)], lam, t),
        &grid,
        &t_samples,
    )
    .or_code(EXIT_NO_CONSTANT)?;

    // Error-system envelope at the true parameters, on a finer sampling so
    // the fundamental-matrix integration stays accurate.
    let lambda_true = spec.lambda_true().to_vec();
    let env_stride = ((0.01 / dt).round() as usize).max(1);
    let env_series = regressor_series(
        spec,
        &exp.run.plant_init,
        vec![lambda_true.clone()],
        args.t_end,
        dt,
        env_stride,
        window,
    )
    .map_err(sampling_failure)?;
    let env_warm = ((window / env_series.dt).ceil() as usize)
        .min(env_series.values[0].len().saturating_sub(8));
    let env = estimate_error_system_envelope(
        &env_series.values[0][env_warm..],
        env_series.dt,
        cfg.observer.alpha,
        cfg.observer.gamma_theta,
    )
    .or_code(EXIT_NO_CONSTANT)?;

    // Torus chart constants.
    let torus =
        estimate_torus_constants(&boxes, &cfg.observer.omega, 512).or_code(EXIT_NO_CONSTANT)?;

    // Derivative bound on the synthetic scalar output at the true parameters.
    let upsilon = upsilon_series(
        spec,
        &exp.run.plant_init,
        vec![lambda_true.clone()],
        args.t_end,
        dt,
        args.stride,
        window,
    )
    .map_err(sampling_failure)?;
    let ups_warm = ((window / upsilon.dt).ceil() as usize)
        .min(upsilon.values[0].len().saturating_sub(2));
    let ups_scalar: Vec<f64> = upsilon.values[0][ups_warm..].iter().map(|v| v[0]).collect();
    let du = estimate_derivative_bound(&ups_scalar, upsilon.dt).or_code(EXIT_NO_CONSTANT)?;

    // Residual magnitudes from a short closed-loop run.
    let mut mini = cfg.clone();
    let te = (2.0 * window + 100.0).min(cfg.grid.t_end);
    mini.grid.t_end = (te / dt).round() * dt;
    let mini_run = mini.build().or_code(EXIT_CONFIG)?.run().map_err(observer_failure)?;
    let delta_phi = mini_run.diagnostics.delta_phi;
    let delta_xi = mini_run.diagnostics.delta_xi;

    // Filter-decay floor: worst beta over sampled states and grid parameters.
    let mut beta_cb = f64::INFINITY;
    let t_step = ((x0_series.len() - 1) / 200).max(1);
    for i in 1..=spec.n() {
        for (k, &x0) in x0_series.iter().enumerate().step_by(t_step) {
            let t = series_t0 + k as f64 * series_dt;
            for lam in &grid {
                beta_cb = beta_cb.min(spec.channel_beta(i, x0, lam, t));
            }
        }
    }
    if !(beta_cb > 0.0) || !beta_cb.is_finite() {
        return Err(Failure::new(
            EXIT_NO_CONSTANT,
            anyhow!("filter decay lower bound came out nonpositive ({beta_cb})"),
        ));
    }

    let theta_norm = spec.theta_true().iter().map(|v| v * v).sum::<f64>().sqrt();
    let inputs = BoundInputs {
        mu,
        b: consts.b,
        d: consts.d,
        d_c: consts.d_c,
        l: args.l,
        m: torus.m,
        rho: env.rho,
        d_rho: env.d_rho,
        d_lambda: torus.d_lambda,
        theta_norm,
        delta_phi,
        delta_xi,
        du,
        beta_cb,
    };
    let gs = gamma_star(&inputs, &default_d_grid(), &default_psi_grid()).or_code(EXIT_NO_CONSTANT)?;
    let delta = delta_total(theta_norm, delta_phi, delta_xi).or_code(EXIT_NO_CONSTANT)?;
    let ltv =
        ltv_residual_bound(cfg.observer.epsilon, du, beta_cb, delta).or_code(EXIT_NO_CONSTANT)?;
    let kappa_iss = env.d_rho / env.rho;
    let box_diam = boxes.iter().map(|&(lo, hi)| (hi - lo) * (hi - lo)).sum::<f64>().sqrt();
    let theta_diam = theta_error_bound(kappa_iss, consts.d, consts.d_c, theta_norm, box_diam, delta)
        .or_code(EXIT_NO_CONSTANT)?;

    // Two-subsystem interconnection bound; needs envelope overshoot above 1.
    let omega_max = cfg.observer.omega.iter().fold(0.0f64, |a, &w| a.max(w.abs()));
    let c1 = consts.d * theta_norm + consts.d_c;
    let c2 = torus.m * omega_max;
    let (cascade, cascade_note): (Value, Value) = if env.d_rho > 1.0 {
        match cascade_bounds(
            |t| env.d_rho * (-env.rho * t).exp(),
            c1,
            c2,
            delta,
            0.0,
            theta_norm,
            box_diam,
            args.l,
            env.d_rho,
            gs.d_at_min,
        ) {
            Ok((gamma_max, epsilon_min)) => {
                (json!({ "gamma_max": gamma_max, "epsilon_min": epsilon_min }), Value::Null)
            }
            Err(e) => (Value::Null, Value::String(format!("not evaluated: {e}"))),
        }
    } else {
        (
            Value::Null,
            Value::String(format!(
                "not evaluated: fitted envelope overshoot {:.3} does not exceed 1",
                env.d_rho
            )),
        )
    };

    let gamma_eff = cfg.observer.gamma * omega_max;
    let mut advisories: Vec<String> = Vec::new();
    if gamma_eff > gs.value {
        advisories.push(format!(
            "configured search speed gamma*max|omega| = {gamma_eff:.3e} exceeds the admissible gamma_star = {:.3e}; the guarantee does not cover this run",
            gs.value
        ));
    }
    if cfg.observer.epsilon < ltv {
        advisories.push(format!(
            "dead-zone width {} is below the estimated residual level {ltv:.3e}; the raw error may never settle inside the zone",
            cfg.observer.epsilon
        ));
    }

    let provenance = |value: f64, label: &str| json!({ "value": value, "provenance": label });
    let report = json!({
        "config": source,
        "window_length": args.l,
        "sampling": { "t_end": args.t_end, "dt": series_dt, "grid_points": grid.len() },
        "constants": {
            "mu": provenance(mu, "smallest window-Gram eigenvalue over the sampling grid"),
            "b": provenance(consts.b, "sampled sup-norm of the filtered regressor"),
            "d": provenance(consts.d, "difference-quotient Lipschitz estimate of the regressor across grid pairs"),
            "d_c": provenance(consts.d_c, "difference-quotient Lipschitz estimate of the additive term across grid pairs"),
            "rho": provenance(env.rho, "decay rate of the envelope fitted to the error-system fundamental matrix at the true parameters"),
            "d_rho": provenance(env.d_rho, "overshoot of the fitted envelope"),
            "envelope_fit_residual": provenance(env.fit_residual, "max log-gap of the envelope fit"),
            "m": provenance(torus.m, "max chart sensitivity over sampled phases"),
            "d_lambda": provenance(torus.d_lambda, "diameter of the chart image"),
            "theta_norm": provenance(theta_norm, "norm of the true coefficient vector"),
            "delta_phi": provenance(delta_phi, "regressor truncation plus quadrature error from a short closed-loop run"),
            "delta_xi": provenance(delta_xi, "disturbance pass-through from the same run"),
            "du": provenance(du, "max centered difference of the synthetic scalar output at the true parameters"),
            "beta_cb": provenance(beta_cb, "worst filter decay over sampled states and grid parameters"),
        },
        "bounds": {
            "delta_total": delta,
            "gamma_star": {
                "value": gs.value,
                "pe_cap": gs.pe_cap,
                "grid_term": gs.grid_term,
                "d_at_min": gs.d_at_min,
                "psi_at_min": gs.psi_at_min,
            },
            "ltv_residual": ltv,
            "iss_gain": kappa_iss,
            "theta_error_at_box_diameter": theta_diam,
            "cascade": cascade,
            "cascade_note": cascade_note,
        },
        "advisories": advisories,
    });

    let out = resolve_out(args.out.clone(), &cfg.name);
    fs::create_dir_all(&out)
        .map_err(|e| Failure::new(EXIT_INTERNAL, anyhow!("creating `{}`: {e}", out.display())))?;
    let path = out.join("bounds.json");
    write_json(&path, &report)?;

    println!(
        "{}: gamma_star = {:.6e} (excitation cap {:.3e}, contraction term {:.3e})",
        cfg.name, gs.value, gs.pe_cap, gs.grid_term
    );
    println!("  mu = {:.6e} over {} grid points, window {}", mu, grid.len(), args.l);
    println!(
        "  constants: b {:.3e}, d {:.3e}, d_c {:.3e}, rho {:.3e}, d_rho {:.3e}, m {:.3e}, du {:.3e}, beta_floor {:.3e}",
        consts.b, consts.d, consts.d_c, env.rho, env.d_rho, torus.m, du, beta_cb
    );
    println!("  residual delta {:.3e}, dead-zone floor {:.3e}", delta, ltv);
    for note in &advisories {
        println!("  advisory: {note}");
    }
    println!("  wrote {}", path.display());
    Ok(())
}

/// Open-loop plant trajectory, storing `x0` at every `stride`-th step plus
/// the final one — the same sampling convention as the series helpers.
fn simulate_x0(
    spec: &PlantSpec,
    init: &[f64],
    t_end: f64,
    dt: f64,
    stride: usize,
) -> Result<Vec<f64>, Failure> {
    let steps = ((t_end / dt).round() as usize).max(1);
    let stride = stride.max(1);
    let dim = init.len();
    let mut x = init.to_vec();
    let mut out = Vec::with_capacity(steps / stride + 2);
    out.push(x[0]);
    let stage = |x: &[f64], k: &[f64], h: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(&a, &b)| a + h * b).collect()
    };
    for k in 0..steps {
        let t = k as f64 * dt;
        let rhs = |tt: f64, xx: &[f64]| {
            spec.plant_rhs(tt, xx).map_err(|e| {
                Failure::new(EXIT_DIVERGED, anyhow!("open-loop plant evaluation at t = {tt}: {e}"))
            })
        };
        let k1 = rhs(t, &x)?;
        let k2 = rhs(t + 0.5 * dt, &stage(&x, &k1, 0.5 * dt))?;
        let k3 = rhs(t + 0.5 * dt, &stage(&x, &k2, 0.5 * dt))?;
        let k4 = rhs(t + dt, &stage(&x, &k3, dt))?;
        for j in 0..dim {
            x[j] += dt / 6.0 * (k1[j] + 2.0 * (k2[j] + k3[j]) + k4[j]);
            if !x[j].is_finite() {
                return Err(Failure::new(
                    EXIT_DIVERGED,
                    anyhow!("open-loop plant state diverged at t = {}", t + dt),
                ));
            }
        }
        if (k + 1) % stride == 0 || k + 1 == steps {
            out.push(x[0]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// list-examples
// ---------------------------------------------------------------------------

fn cmd_list_examples(args: &ListExamplesArgs) -> Result<(), Failure> {
    if let Some(dir) = &args.emit {
        fs::create_dir_all(dir).map_err(|e| {
            Failure::new(EXIT_INTERNAL, anyhow!("creating `{}`: {e}", dir.display()))
        })?;
    }
    for name in builtin_names() {
        let cfg = builtin(name).expect("listed name resolves");
        println!(
            "{:<16} plant {:<14} t_end {:>8}  dt {}",
            name, cfg.plant.kind, cfg.grid.t_end, cfg.grid.dt
        );
        if let Some(dir) = &args.emit {
            let path = dir.join(format!("{name}.ini"));
            write_bytes(&path, cfg.to_text().as_bytes())?;
        }
    }
    if let Some(dir) = &args.emit {
        println!("wrote configs under {}", dir.display());
    }
    Ok(())
}
