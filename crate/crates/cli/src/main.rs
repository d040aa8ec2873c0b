//! `cssm` — command-line front end for the coupled state-space engine.
//!
//! Subcommands: `verify` (randomized property suite), `train` (synthetic
//! multi-modal task, multi-seed), `eval` (checkpoint against a dataset),
//! `bench` (sequence-length scaling sweep). Exit codes: 0 success,
//! 1 property/verification failure, 2 usage or config error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cssm_core::data::{export_dataset, generate_dataset, import_dataset, SyntheticTaskSpec};
use cssm_core::metrics::MetricReport;
use cssm_core::model::{CoupledModelConfig, FusionMode};
use cssm_core::sweep::{fit_scaling_exponent, run_sweep, SweepConfig, BENCH_CSV_HEADER};
use cssm_core::train::{evaluate, train_model, TrainConfig};
use cssm_core::verify::{run_verification, VerifyOptions};
use cssm_core::{CoreError, ParameterStore};

#[global_allocator]
static ALLOC: cssm_core::alloc::CountingAllocator = cssm_core::alloc::CountingAllocator;

/// Environment variable that overrides the configured output directory.
const OUTPUT_DIR_ENV: &str = "CSSM_OUTPUT_DIR";

const METRICS_CSV_HEADER: &str = "seed,fusion,epoch,mae,corr,acc2,f1,acc3,f13";

#[derive(Parser)]
#[command(name = "cssm", version, about = "Coupled state-space model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized equivalence and gradient property suite.
    Verify(VerifyArgs),
    /// Train on the synthetic multi-modal task, one run per seed.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a stored or regenerated dataset.
    Eval(EvalArgs),
    /// Sweep sequence lengths and fit time/memory scaling exponents.
    Bench(BenchArgs),
}

#[derive(Args)]
struct VerifyArgs {
    /// Override every property's pinned tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Maximum random dimensions, e.g. "L=64,N=8,E=8,M=4".
    #[arg(long)]
    sizes: Option<String>,
    /// Random instances per property.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Number of independent seeds to train.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameter checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration (TOML), typically the resolved echo next to the
    /// checkpoint.
    #[arg(long)]
    config: PathBuf,
    /// Path stem of an exported dataset; regenerated from the config's
    /// task section when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Optional run configuration; only the output directory is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated sequence lengths, strictly ascending.
    #[arg(long)]
    lengths: Option<String>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Top-level run configuration. Every field has a default; unknown keys
/// are rejected at parse time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Base seed; seed index i trains with `seed + i`.
    seed: u64,
    output_dir: PathBuf,
    model: CoupledModelConfig,
    task: SyntheticTaskSpec,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: CoupledModelConfig::default(),
            task: SyntheticTaskSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Errors carrying the exit code they map to.
enum CliError {
    /// Config/usage problems → exit 2.
    Usage(String),
    /// Everything else (verification failures, runtime errors) → exit 1.
    Run(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

fn load_run_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    // The toml error Display includes the line/column of the offending key.
    let mut cfg: RunConfig = toml::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config error in {}:\n{e}", path.display())))?;
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    cfg.model.validate().map_err(CliError::from)?;
    cfg.task.validate().map_err(CliError::from)?;
    Ok(cfg)
}

/// Write the fully-resolved config next to the artifacts so the run
/// directory is self-describing.
fn echo_resolved(cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Run(format!("serialize resolved config: {e}")))?;
    std::fs::write(cfg.output_dir.join("resolved.toml"), text)?;
    Ok(())
}

fn parse_sizes(spec: &str, opts: &mut VerifyOptions) -> Result<(), CliError> {
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (key, val) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("bad --sizes entry '{part}', want KEY=N")))?;
        let n: usize = val
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad --sizes value '{val}'")))?;
        if n == 0 {
            return Err(CliError::Usage("--sizes values must be >= 1".into()));
        }
        match key.trim().to_ascii_uppercase().as_str() {
            "L" => opts.max_l = n,
            "N" => opts.max_n = n,
            "E" => opts.max_e = n,
            "M" => opts.max_m = n,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown --sizes key '{other}' (expected L, N, E, or M)"
                )))
            }
        }
    }
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let mut opts = VerifyOptions {
        tolerance: args.tolerance,
        instances: args.instances,
        seed: args.seed,
        ..VerifyOptions::default()
    };
    if let Some(sizes) = &args.sizes {
        parse_sizes(sizes, &mut opts)?;
    }
    let results = run_verification(&opts)?;
    println!(
        "{:<28} {:>14} {:>12} {:>12}  status",
        "property", "max_deviation", "tolerance", "worst_seed"
    );
    let mut failures = Vec::new();
    for r in &results {
        println!(
            "{:<28} {:>14.3e} {:>12.1e} {:>12}  {}",
            r.name,
            r.max_deviation,
            r.tolerance,
            r.worst_seed,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failures.push(r);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        let mut msg = String::from("verification failed:");
        for r in failures {
            let _ = write!(
                msg,
                "\n  {}: deviation {:.3e} > {:.1e}; replay with --seed {}",
                r.name, r.max_deviation, r.tolerance, r.worst_seed
            );
        }
        Err(CliError::Run(msg))
    }
}

fn fmt_report(seed_label: &str, fusion: &str, epoch: usize, m: &MetricReport) -> String {
    format!("{seed_label},{fusion},{epoch},{}", m.csv_fields())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let cfg = load_run_config(&args.config)?;
    echo_resolved(&cfg)?;
    let dataset = generate_dataset(&cfg.task)?;
    export_dataset(&dataset, &cfg.output_dir.join("dataset"))?;
    let fusion = cfg.model.fusion.name();
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    let mut finals: Vec<MetricReport> = Vec::new();
    for i in 0..args.seeds {
        let seed = cfg.seed + i;
        let tcfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let outcome = train_model(&cfg.model, &dataset, &tcfg)?;
        for (epoch, rep) in outcome.history.iter().enumerate() {
            csv.push_str(&fmt_report(&seed.to_string(), fusion, epoch + 1, rep));
            csv.push('\n');
        }
        let last = outcome.history.last().expect("epochs >= 1");
        println!(
            "seed {seed}: final val MAE {:.4} Corr {:.4} Acc2 {:.4} | test MAE {:.4} Acc2 {:.4}",
            last.mae, last.corr, last.acc2, outcome.test.mae, outcome.test.acc2
        );
        finals.push(last.clone());
        outcome
            .store
            .save(&cfg.output_dir.join(format!("checkpoint_seed{seed}.cssm")))?;
    }
    // Aggregate rows over the final-epoch validation metrics.
    let fields: Vec<Vec<f64>> = finals
        .iter()
        .map(|m| vec![m.mae, m.corr, m.acc2, m.f1, m.acc3, m.f13])
        .collect();
    let last_epoch = cfg.train.epochs;
    for (label, pick) in [("mean", 0usize), ("std", 1usize)] {
        let stats: Vec<String> = (0..6)
            .map(|j| {
                let col: Vec<f64> = fields.iter().map(|row| row[j]).collect();
                let (mean, std) = mean_std(&col);
                format!("{}", if pick == 0 { mean } else { std })
            })
            .collect();
        csv.push_str(&format!(
            "{label},{fusion},{last_epoch},{}\n",
            stats.join(",")
        ));
    }
    let csv_path = cfg.output_dir.join("metrics.csv");
    std::fs::write(&csv_path, csv)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let cfg = load_run_config(&args.config)?;
    let store = ParameterStore::load(&args.checkpoint)?;
    let dataset = match &args.dataset {
        Some(stem) => import_dataset(stem)?,
        None => generate_dataset(&cfg.task)?,
    };
    let split = match args.split.as_str() {
        "train" => &dataset.train,
        "val" => &dataset.val,
        "test" => &dataset.test,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split '{other}' (expected train, val, or test)"
            )))
        }
    };
    let report = evaluate(&store, &cfg.model, split)?;
    println!(
        "split {}: MAE {:.6} Corr {:.6} Acc2 {:.6} F1 {:.6} Acc3 {:.6} F1-3 {:.6}",
        args.split, report.mae, report.corr, report.acc2, report.f1, report.acc3, report.f13
    );
    println!("{METRICS_CSV_HEADER}");
    println!("{}", fmt_report("-", cfg.model.fusion.name(), 0, &report));
    Ok(())
}

fn parse_lengths(spec: &str) -> Result<Vec<usize>, CliError> {
    spec.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad length '{p}'")))
        })
        .collect()
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let out_dir = match &args.config {
        Some(path) => {
            let cfg = load_run_config(path)?;
            cfg.output_dir
        }
        None => std::env::var(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|_| PathBuf::from("runs/bench")),
    };
    let mut sweep = SweepConfig {
        repeats: args.repeats,
        seed: args.seed,
        ..SweepConfig::default()
    };
    if let Some(spec) = &args.lengths {
        sweep.lengths = parse_lengths(spec)?;
    }
    let records = run_sweep(&sweep)?;
    std::fs::create_dir_all(&out_dir)?;
    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let csv_path = out_dir.join("bench.csv");
    std::fs::write(&csv_path, csv)?;
    println!("wrote {}", csv_path.display());
    // Exponent summary per engine, with the acceptance band where one is
    // defined (linear-time scan vs quadratic attention).
    for &fusion in &sweep.fusions {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.fusion == fusion.name() && !r.failed)
            .map(|r| (r.l as f64, r.median_s))
            .collect();
        let name = fusion.name();
        match fit_scaling_exponent(&pts) {
            Ok(exp) => {
                let verdict = match fusion {
                    FusionMode::Coupled | FusionMode::Mamba => Some(("<= 1.2", exp <= 1.2)),
                    FusionMode::CrossAttention => Some((">= 1.6", exp >= 1.6)),
                    _ => None,
                };
                match verdict {
                    Some((band, ok)) => println!(
                        "{name}: time exponent {exp:.3} (band {band}) {}",
                        if ok { "pass" } else { "FAIL" }
                    ),
                    None => println!("{name}: time exponent {exp:.3}"),
                }
            }
            Err(e) => println!("{name}: exponent fit skipped ({e})"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
