//! Experiment CLI: dataset generation, single-estimator identification, the
//! full benchmark comparison, and the cross-check suite.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use regid::experiment::{
    emit_csv_with_sample_period, generate_run_dataset, identify_dataset, read_dataset_csv,
    run_experiment, verify, write_dataset_csv, EstimatorKind, ExperimentConfig,
};
use regid::lti::DataRecord;

#[derive(Parser)]
#[command(name = "regid", version, about = "Recursive regularized FIR identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark dataset and write it as CSV (`t,u,y`).
    Simulate(SimulateArgs),
    /// Run one estimator over a dataset CSV and write its metric trajectory.
    Identify(IdentifyArgs),
    /// Run the full comparison study and write per-estimator CSVs.
    Compare(CompareArgs),
    /// Run the batch-mode cross-check suite and report pass/fail per check.
    Verify(VerifyArgs),
}

/// Configuration shared by the subcommands. Values come from defaults, then
/// an optional TOML file (flat `key = value`), then individual flag
/// overrides.
#[derive(Args, Debug)]
struct ConfigArgs {
    /// Configuration file (flat `key = value`, TOML syntax).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Model order n.
    #[arg(long)]
    order: Option<usize>,
    /// Samples per run.
    #[arg(long)]
    samples: Option<usize>,
    /// Input standard deviation.
    #[arg(long)]
    input_std: Option<f64>,
    /// Measurement-noise standard deviation.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Comma-separated initial diagonal gains of the RLS baselines.
    #[arg(long, value_delimiter = ',')]
    rls_f0: Option<Vec<f64>>,
    /// Hyperparameter adaptation gain.
    #[arg(long)]
    gamma: Option<f64>,
    /// Initial log-variance of the first tap.
    #[arg(long)]
    eta1_init: Option<f64>,
    /// Initial log-ratio between consecutive prior variances.
    #[arg(long)]
    ratio_init: Option<f64>,
    /// Number of Monte-Carlo runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Base seed (run k uses base_seed + k).
    #[arg(long)]
    base_seed: Option<u64>,
    /// Explicit comma-separated run seeds (overrides --runs/--base-seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Neumann truncation order of the re-linearization.
    #[arg(long)]
    correction_order: Option<usize>,
    /// Fallback slope of the constraint projection.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Impulse-response MSE horizon (default: model order).
    #[arg(long)]
    mse_horizon: Option<usize>,
    /// Re-linearization budget (number of applied Delta entries per sample).
    #[arg(long)]
    relin_budget: Option<usize>,
    /// Reuse the same input sequence across runs (fresh noise only).
    #[arg(long)]
    fixed_input: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        set!(order);
        set!(samples);
        set!(input_std);
        set!(noise_std);
        set!(rls_f0);
        set!(gamma);
        set!(eta1_init);
        set!(ratio_init);
        set!(runs);
        set!(base_seed);
        set!(correction_order);
        set!(epsilon);
        if self.seeds.is_some() {
            cfg.seeds = self.seeds.clone();
        }
        if self.mse_horizon.is_some() {
            cfg.mse_horizon = self.mse_horizon;
        }
        if self.relin_budget.is_some() {
            cfg.relin_budget = self.relin_budget;
        }
        if self.fixed_input {
            cfg.fixed_input = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Resolve and optionally dump the configuration; returns `None` when
    /// `--print-config` consumed the invocation.
    fn resolve_or_print(&self) -> anyhow::Result<Option<ExperimentConfig>> {
        let cfg = self.resolve()?;
        if self.print_config {
            print!("{}", toml::to_string(&cfg)?);
            return Ok(None);
        }
        Ok(Some(cfg))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run seed; `simulate --seed S` reproduces the dataset of the compare
    /// run with seed S.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path.
    #[arg(long, short, default_value = "dataset.csv")]
    output: PathBuf,
}

#[derive(Args)]
struct IdentifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input dataset CSV (header `t,u,y`).
    #[arg(long, short)]
    input: PathBuf,
    /// Estimator: `regularized`, `rls` (with --f0), or `rls_f0_<gain>`.
    #[arg(long, default_value = "regularized")]
    estimator: String,
    /// Initial diagonal gain for `--estimator rls`.
    #[arg(long, default_value_t = 1.0)]
    f0: f64,
    /// Output metrics CSV path.
    #[arg(long, short, default_value = "metrics.csv")]
    output: PathBuf,
    /// Relabel the time axis in seconds with this sampling period.
    #[arg(long)]
    ts: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the per-estimator CSV files.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Skip writing the per-run raw series (means are always written).
    #[arg(long)]
    no_runs: bool,
    /// Relabel the time axis in seconds with this sampling period.
    #[arg(long)]
    ts: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Seed of the deterministic check instances.
    #[arg(long, default_value_t = 20)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Simulate(args) => simulate(args),
        Command::Identify(args) => identify(args),
        Command::Compare(args) => compare(args),
        Command::Verify(args) => run_verify(args),
    }
}

fn simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let Some(cfg) = args.config.resolve_or_print()? else {
        return Ok(ExitCode::SUCCESS);
    };
    let (rec, clean) = generate_run_dataset(&cfg, args.seed)?;
    write_dataset_csv(&rec, &args.output)?;
    let snr = if cfg.noise_std > 0.0 {
        format!("{:.2} dB", regid::metrics::snr_db(&clean, cfg.noise_std)?)
    } else {
        "inf (noiseless)".into()
    };
    println!(
        "wrote {} samples to {} (seed {}, SNR {snr})",
        rec.u.len(),
        args.output.display(),
        args.seed
    );
    Ok(ExitCode::SUCCESS)
}

fn identify(args: IdentifyArgs) -> anyhow::Result<ExitCode> {
    let Some(cfg) = args.config.resolve_or_print()? else {
        return Ok(ExitCode::SUCCESS);
    };
    let kind = match args.estimator.as_str() {
        "rls" => EstimatorKind::Rls { f0: args.f0 },
        other => EstimatorKind::parse(other)?,
    };
    let (u, y) = read_dataset_csv(&args.input)?;
    if y.len() < 2 {
        bail!("dataset {} has fewer than 2 samples", args.input.display());
    }
    let rec = DataRecord {
        u,
        y,
        e_std: cfg.noise_std,
        seed: 0,
    };
    let out = identify_dataset(&cfg, &rec, &kind)?;
    emit_csv_with_sample_period(&out.series, &args.output, args.ts)?;
    let last = out.series.records.last().expect("nonempty series");
    println!(
        "{}: {} samples, final impulse-response MSE {:.6e}, final fit {:.2}%, metrics in {}",
        kind.name(),
        rec.u.len(),
        last.mse_impulse,
        last.fit_percent,
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn compare(args: CompareArgs) -> anyhow::Result<ExitCode> {
    let Some(cfg) = args.config.resolve_or_print()? else {
        return Ok(ExitCode::SUCCESS);
    };
    let result = run_experiment(&cfg)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let runs_dir = args.out_dir.join("runs");
    if !args.no_runs {
        std::fs::create_dir_all(&runs_dir)?;
    }
    for est in &result.estimators {
        emit_csv_with_sample_period(
            &est.mean,
            &args.out_dir.join(format!("{}_mean.csv", est.name)),
            args.ts,
        )?;
        if !args.no_runs {
            for (k, run) in est.runs.iter().enumerate() {
                emit_csv_with_sample_period(
                    run,
                    &runs_dir.join(format!("{}_run{k}.csv", est.name)),
                    args.ts,
                )?;
            }
        }
    }

    println!(
        "{} runs ({} failed), mean SNR {:.2} dB",
        result.run_seeds.len(),
        result.failed_runs.len(),
        result.mean_snr_db
    );
    println!("{:<14} {:>16} {:>12}", "estimator", "final MSE", "final fit");
    for est in &result.estimators {
        let last = est.mean.records.last().expect("nonempty series");
        println!(
            "{:<14} {:>16.6e} {:>11.2}%",
            est.name, last.mse_impulse, last.fit_percent
        );
    }
    println!("CSV files in {}", args.out_dir.display());

    for (seed, msg) in &result.failed_runs {
        eprintln!("run with seed {seed} failed: {msg}");
    }
    if result.failed_fraction() > 0.2 {
        eprintln!(
            "error: {:.0}% of runs failed",
            100.0 * result.failed_fraction()
        );
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn run_verify(args: VerifyArgs) -> anyhow::Result<ExitCode> {
    let outcomes = verify::run_all(args.seed);
    let mut all_ok = true;
    for o in &outcomes {
        println!(
            "[{}] {:<28} max error {:>10.3e}  (allowed {:.0e})",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.max_error,
            o.threshold
        );
        all_ok &= o.passed;
    }
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
