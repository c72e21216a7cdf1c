//! `difflab`: run seeded network-learning experiments from a JSON config,
//! print closed-form rate predictions, inspect topologies, and check the
//! numerics.
//!
//! Exit codes: 0 success, 2 configuration problems (bad file, bad JSON,
//! bad values, bad flags), 1 runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use difflab_core::harness::{
    fit_decade_slope, gap_db, prediction_inputs, record_grid, run_monte_carlo_with_threads,
    to_db, topology_for_run, write_curve_csv, write_run_metadata, ExperimentConfig, HarnessError,
    LearningCurve,
};
use difflab_core::selftest;
use difflab_core::strategies::StrategyKind;
use difflab_core::theory::{asymptotic_er_predictor, cramer_rao_msd, large_step_er_approx, transient_bounds};

#[derive(Parser)]
#[command(name = "difflab", version, about = "Distributed stochastic learning over ad-hoc networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the Monte Carlo experiment and emit the learning-curve CSV.
    Simulate(RunArgs),
    /// Emit closed-form predictions on the experiment's recording grid.
    Predict(RunArgs),
    /// Run the experiment and summarize strategies against each other.
    Compare(RunArgs),
    /// Print a run's network: one neighbor list per node, then the
    /// squared norm of the combiner's Perron vector.
    Topology {
        /// JSON experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Which run's topology to draw.
        #[arg(long, default_value_t = 0)]
        run: u32,
    },
    /// Run the built-in numerical checks.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; an optional "output" key names the CSV.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's run count.
    #[arg(long)]
    runs: Option<u32>,
    /// Override the config's iteration horizon.
    #[arg(long)]
    iterations: Option<u64>,
    /// Output CSV path (wins over the config's "output"; stdout if absent).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads (wins over DIFFLAB_THREADS; default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Comma-separated strategy subset, e.g. noncoop,diffusion.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Simulate(args) => simulate(&args),
        Cmd::Predict(args) => predict(&args),
        Cmd::Compare(args) => compare(&args),
        Cmd::Topology { config, run } => topology(&config, run),
        Cmd::Selftest => run_selftest(),
    }
}

/// Loads the config, applying flag overrides, and resolves the output
/// path (flag beats the config's "output" key).
fn load_config(args: &RunArgs) -> Result<(ExperimentConfig, Option<PathBuf>), CliError> {
    let (mut cfg, cfg_output) = read_config_file(&args.config)?;
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    if let Some(r) = args.runs {
        cfg.runs = r;
    }
    if let Some(i) = args.iterations {
        cfg.iterations = i;
    }
    if let Some(names) = &args.strategies {
        let mut kinds = Vec::with_capacity(names.len());
        for n in names {
            let kind = StrategyKind::parse(n).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown strategy {n:?}; expected one of noncoop, centralized, consensus, diffusion"
                ))
            })?;
            kinds.push(kind);
        }
        cfg.strategies = kinds;
    }
    cfg.validate()?;
    Ok((cfg, args.output.clone().or(cfg_output)))
}

fn read_config_file(path: &Path) -> Result<(ExperimentConfig, Option<PathBuf>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let output = match value.as_object_mut().and_then(|m| m.remove("output")) {
        None => None,
        Some(serde_json::Value::String(s)) => Some(PathBuf::from(s)),
        Some(other) => {
            return Err(CliError::Config(format!(
                "{}: \"output\" must be a string, got {other}",
                path.display()
            )));
        }
    };
    let cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((cfg, output))
}

/// Thread count: flag, then DIFFLAB_THREADS, then the global default.
fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("DIFFLAB_THREADS") {
        Ok(s) => {
            let n: usize = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("DIFFLAB_THREADS must be a number, got {s:?}")))?;
            if n == 0 {
                return Err(CliError::Config("DIFFLAB_THREADS must be at least 1".into()));
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn run_experiment(args: &RunArgs) -> Result<(ExperimentConfig, Option<PathBuf>, LearningCurve), CliError> {
    let (cfg, output) = load_config(args)?;
    let threads = resolve_threads(args.threads)?;
    let curve = run_monte_carlo_with_threads(&cfg, threads)?;
    Ok((cfg, output, curve))
}

fn simulate(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, output, curve) = run_experiment(args)?;
    match output {
        Some(path) => {
            write_curve_csv(&curve, &path)?;
            let meta = write_run_metadata(&cfg, &curve, &path)?;
            eprintln!("wrote {} and {}", path.display(), meta.display());
        }
        None => {
            let mut out = std::io::stdout().lock();
            print_curve(&mut out, &curve).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn print_curve(out: &mut impl Write, curve: &LearningCurve) -> std::io::Result<()> {
    writeln!(out, "iteration,strategy,er_mean,er_db,er_stderr,runs")?;
    for c in &curve.curves {
        for (gi, i) in curve.iterations.iter().enumerate() {
            writeln!(
                out,
                "{i},{},{:.16e},{:.16e},{:.16e},{}",
                c.strategy.name(),
                c.er_mean[gi],
                c.er_db[gi],
                c.er_stderr[gi],
                curve.runs
            )?;
        }
    }
    Ok(())
}

fn predict(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, output) = load_config(args)?;
    let inputs = prediction_inputs(&cfg)?;
    let grid = record_grid(cfg.iterations, cfg.record_stride);
    let min_valid = inputs.transient.min_valid_iteration();
    let mut body = String::from("i,predictor_exact,predictor_mlsp,transient_lower,transient_upper,cramer_rao\n");
    for i in grid {
        let exact = asymptotic_er_predictor(&inputs.rate, i).map_err(|e| CliError::Runtime(e.to_string()))?;
        let approx = large_step_er_approx(inputs.rate.mu(), inputs.noise_trace, inputs.perron_norm_sq, i)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let (lo, up) = if i >= min_valid {
            transient_bounds(&inputs.transient, i).map_err(|e| CliError::Runtime(e.to_string()))?
        } else {
            (f64::NAN, f64::NAN)
        };
        let cr = match &inputs.fisher {
            Some(f) => cramer_rao_msd(f, cfg.n_nodes, i).map_err(|e| CliError::Runtime(e.to_string()))?,
            None => f64::NAN,
        };
        body.push_str(&format!(
            "{i},{exact:.16e},{approx:.16e},{lo:.16e},{up:.16e},{cr:.16e}\n"
        ));
    }
    match output {
        Some(path) => std::fs::write(&path, body)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?,
        None => print!("{body}"),
    }
    Ok(())
}

fn compare(args: &RunArgs) -> Result<(), CliError> {
    let (cfg, _, curve) = run_experiment(args)?;
    let window = (cfg.iterations / 10, cfg.iterations);
    let reference = curve
        .curves
        .iter()
        .find(|c| c.strategy == StrategyKind::Diffusion)
        .or(curve.curves.first())
        .expect("validated config has strategies");
    println!(
        "{} runs, horizon {}, window [{}, {}] (gaps against {})",
        curve.runs, cfg.iterations, window.0, window.1, reference.strategy
    );
    println!("{:<12} {:>12} {:>18} {:>12}", "strategy", "final_er_db", "slope_db_per_dec", "gap_db");
    for c in &curve.curves {
        let final_db = *c.er_db.last().unwrap();
        let slope = fit_decade_slope(&curve.iterations, c, window)
            .map(|s| format!("{s:.2}"))
            .unwrap_or_else(|_| "n/a".into());
        let gap = gap_db(&curve.iterations, c, reference, window)
            .map(|g| format!("{g:+.2}"))
            .unwrap_or_else(|_| "n/a".into());
        println!("{:<12} {:>12.2} {:>18} {:>12}", c.strategy.name(), final_db, slope, gap);
    }
    if let Ok(inputs) = prediction_inputs(&cfg) {
        let i = cfg.iterations;
        if let Ok(exact) = asymptotic_er_predictor(&inputs.rate, i) {
            let predicted_db = to_db(exact);
            let measured_db = *reference.er_db.last().unwrap();
            println!(
                "predicted {:.2} dB at i={i}; {} measured {:.2} dB (deviation {:+.2} dB)",
                predicted_db,
                reference.strategy,
                measured_db,
                predicted_db - measured_db
            );
        }
    }
    Ok(())
}

fn topology(config: &Path, run: u32) -> Result<(), CliError> {
    let (cfg, _) = read_config_file(config)?;
    cfg.validate()?;
    let (topo, matrix) = topology_for_run(&cfg, run)?;
    let summary = matrix.spectral_summary().map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut out = String::new();
    for k in 0..topo.n_nodes() {
        out.push_str(&format!("{k}:"));
        for l in topo.neighbors(k) {
            out.push_str(&format!(" {l}"));
        }
        out.push('\n');
    }
    out.push_str(&format!("perron_norm_sq={:.16e}\n", summary.perron_norm_sq()));
    print!("{out}");
    Ok(())
}

fn run_selftest() -> Result<(), CliError> {
    let results = selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{} {} ({})", if r.passed { "ok    " } else { "FAILED" }, r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} checks failed", results.len())));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
