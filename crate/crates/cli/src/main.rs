//! `carnot`: batch verification harness.
//!
//! Exit codes: 0 when every verdict passes, 1 when some verdict fails,
//! 2 for configuration errors.

mod config;
mod suites;
mod zoo;

use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use carnot::metric::{calibrate, CalibrationOptions};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::config::{build_group, invalid, ConfigError, ExperimentConfig, GroupSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "carnot", version, about = "Numerical verification suites on Carnot groups")]
struct Cli {
    /// Caps the worker threads of the inner parallel loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the suites of an experiment config and writes its report.
    Run {
        config: PathBuf,
        /// Overrides the seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplies every sample budget (0.1 for quick runs, 4 for thorough ones).
        #[arg(long, default_value_t = 1.0)]
        budget_scale: f64,
        /// Overrides the report path of the config.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Prints the built-in groups, maps, domains, fields and suites.
    ListZoo,
    /// Computes the calibration constants of a group (zoo name or descriptor file).
    Calibrate {
        group: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1.0)]
        budget_scale: f64,
    },
}

#[derive(Serialize)]
struct SuiteReport {
    suite: &'static str,
    pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    result: Value,
}

#[derive(Serialize)]
struct Timings {
    total_seconds: f64,
    suites: Vec<(&'static str, f64)>,
}

#[derive(Serialize)]
struct Report<'a> {
    schema_version: u32,
    library_version: &'static str,
    cli_version: &'static str,
    config: &'a ExperimentConfig,
    suites: Vec<SuiteReport>,
    pass: bool,
    failing: Vec<&'static str>,
    calibration: Value,
    kp_csv: Option<PathBuf>,
    /// The only fields that differ between identical runs.
    timings: Timings,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run { config, seed, budget_scale, output } => run(&config, seed, budget_scale, output),
        Command::ListZoo => print_json(&zoo::catalog()).map(|_| true),
        Command::Calibrate { group, seed, budget_scale } => calibrate_group(&group, seed, budget_scale).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
    }
}

fn print_json(v: &impl Serialize) -> Result<(), ConfigError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| invalid(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn check_scale(s: f64) -> Result<(), ConfigError> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("--budget-scale must be a positive number, got {s}")))
    }
}

fn calibrate_group(name: &str, seed: Option<u64>, scale: f64) -> Result<(), ConfigError> {
    check_scale(scale)?;
    let spec = if Path::new(name).is_file() {
        GroupSpec::File { descriptor: name.into() }
    } else {
        GroupSpec::Named(name.into())
    };
    let g = build_group(&spec)?;
    let mut opts = CalibrationOptions::for_group(&g);
    let s = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    opts.volume_samples = s(opts.volume_samples);
    opts.equivalence_samples = s(opts.equivalence_samples);
    if let Some(seed) = seed {
        opts.seed = seed;
    }
    print_json(&calibrate(&g, &opts))
}

/// Runs a config; `Ok(false)` when some verdict failed.
fn run(path: &Path, seed: Option<u64>, scale: f64, output: Option<PathBuf>) -> Result<bool, ConfigError> {
    check_scale(scale)?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if output.is_some() {
        cfg.output = output;
    }
    cfg.validate()?;
    cfg.budgets = cfg.budgets.scaled(scale);

    let group = build_group(&cfg.group)?;
    let ctx = suites::Context {
        domain: zoo::build_domain(&group, &cfg.domain)?,
        map: zoo::build_map(&group, &cfg.map)?,
        field: zoo::build_field(&group, cfg.field.as_ref())?,
        group,
        p: cfg.p,
        q: cfg.q,
        budgets: cfg.budgets.clone(),
        seed: cfg.seed,
    };
    ctx.preflight(&cfg.suites)?;

    let start = Instant::now();
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    let mut distortion = None;
    for &suite in &cfg.suites {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| ctx.run(suite)))
            .unwrap_or_else(|p| Err(format!("panic: {}", panic_message(&p))));
        let secs = t.elapsed().as_secs_f64();
        timings.push((suite.name(), secs));
        let report = match outcome {
            Ok(o) => {
                if o.distortion.is_some() {
                    distortion = o.distortion;
                }
                SuiteReport { suite: suite.name(), pass: o.pass, error: None, result: o.result }
            }
            Err(e) => SuiteReport { suite: suite.name(), pass: false, error: Some(e), result: Value::Null },
        };
        eprintln!("{} {} ({secs:.1}s)", if report.pass { "PASS" } else { "FAIL" }, report.suite);
        reports.push(report);
    }

    let kp_csv = match (&cfg.output, &distortion) {
        (Some(out), Some(d)) => {
            let csv_path = out.with_extension("kp.csv");
            let file = std::fs::File::create(&csv_path).map_err(|source| ConfigError::Io { path: csv_path.clone(), source })?;
            d.write_csv(std::io::BufWriter::new(file)).map_err(|e| invalid(format!("{}: {e}", csv_path.display())))?;
            Some(csv_path)
        }
        _ => None,
    };

    let failing: Vec<&'static str> = reports.iter().filter(|r| !r.pass).map(|r| r.suite).collect();
    let mut calibration = serde_json::Map::new();
    calibration.insert("source".into(), calibration_used(&ctx.group));
    let target = ctx.map.target();
    if target != &ctx.group {
        calibration.insert("target".into(), calibration_used(target));
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        library_version: carnot::VERSION,
        cli_version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        pass: failing.is_empty(),
        failing: failing.clone(),
        suites: reports,
        calibration: Value::Object(calibration),
        kp_csv,
        timings: Timings { total_seconds: start.elapsed().as_secs_f64(), suites: timings },
    };

    let text = serde_json::to_string_pretty(&report).map_err(|e| invalid(e.to_string()))?;
    match &cfg.output {
        Some(out) => {
            std::fs::write(out, text + "\n").map_err(|source| ConfigError::Io { path: out.clone(), source })?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{text}");
        }
    }
    for r in report.suites.iter().filter(|r| !r.pass) {
        let detail = r.error.clone().unwrap_or_else(|| r.result.to_string());
        eprintln!("failing verdict {}: {detail}", r.suite);
    }
    Ok(report.pass)
}

/// Calibration constants of a group. Closed-form laws are calibrated on the
/// spot; optimizer groups report theirs only if some suite computed them,
/// since calibrating them is expensive.
fn calibration_used(g: &carnot::group::Group<f64>) -> Value {
    let c = match g.law() {
        carnot::group::Law::Bch => g.calibration_if_ready(),
        _ => Some(g.calibration()),
    };
    c.and_then(|c| serde_json::to_value(c).ok()).unwrap_or(Value::Null)
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown".into())
}
