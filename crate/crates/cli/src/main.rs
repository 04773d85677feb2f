use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use etl_lqr::config::{preset_names, preset_text, ExperimentConfig};
use etl_lqr::etl::{self, EtlConfig, OfflinePlan};
use etl_lqr::excitation::{write_curve_csv, write_samples_csv};
use etl_lqr::validate::{run_oracles, ValidateOptions};
use etl_lqr::Error;

#[derive(Parser)]
#[command(name = "etl-lqr", version, about = "Event-triggered learning for robust LQR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and fit the improvement curve, report the excitation length.
    Beta(BetaArgs),
    /// Seeded ETL runs against the static robust controller.
    Run(RunArgs),
    /// Check closed forms against simulation.
    Validate(ValidateArgs),
    /// Print a built-in preset.
    DumpPreset { name: String },
}

#[derive(Args)]
struct Common {
    /// Built-in preset name.
    #[arg(long, default_value = "dean_benchmark", conflicts_with = "config")]
    preset: String,
    /// Experiment config file, instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Output {
    #[arg(long, env = "ETL_LQR_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Design {
    /// Comma-separated excitation lengths for the improvement curve.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Improvement samples per grid point.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct BetaArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    design: Design,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    design: Design,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Parallel seeds; 0 uses all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    common: Common,
    /// Override every oracle tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

enum Failure {
    Config(String),
    Oracle,
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::NotRobust { .. } | Error::InvalidArgument(_) | Error::Dimension(_) => {
                Failure::Config(e.to_string())
            }
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn load(common: &Common, design: Option<&Design>) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_toml(&fs::read_to_string(path)?)?,
        None => ExperimentConfig::preset(&common.preset)?,
    };
    if let Some(d) = design {
        if let Some(grid) = &d.grid {
            if grid.is_empty() || grid.contains(&0) {
                return Err(Failure::Config("grid needs positive excitation lengths".into()));
            }
            cfg.beta_grid = grid.clone();
        }
        if let Some(n) = d.samples {
            if n == 0 {
                return Err(Failure::Config("--samples must be positive".into()));
            }
            cfg.beta_samples = n;
        }
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    Ok(BufWriter::new(File::create(path)?))
}

fn plan_json(plan: &OfflinePlan) -> serde_json::Value {
    let k0: Vec<Vec<f64>> = plan.k0.0.row_iter().map(|r| r.iter().copied().collect()).collect();
    json!({
        "k0": k0,
        "k0_robust_rate": plan.robust_rate,
        "constants": plan.constants,
        "beta_gamma": plan.model.beta.gamma,
        "n_bar_star": plan.n_bar,
        "xi": plan.xi.as_ref().ok(),
        "xi_error": plan.xi.as_ref().err(),
        "calibration": plan.calibration,
        "applicable": plan.applicable(),
    })
}

fn cmd_beta(args: &BetaArgs) -> Result<(), Failure> {
    let cfg = load(&args.common, Some(&args.design))?;
    let plan = OfflinePlan::build(&cfg, args.common.seed)?;
    fs::create_dir_all(&args.output.out)?;
    write_samples_csv(&plan.samples, create(&args.output.out.join("beta_samples.csv"))?)?;
    let n_max = cfg.beta_grid.iter().copied().max().unwrap_or(1).max(plan.n_bar);
    write_curve_csv(&plan.model.beta, n_max, 201, create(&args.output.out.join("beta_fit.csv"))?)?;
    let summary = plan_json(&plan);
    serde_json::to_writer_pretty(create(&args.output.out.join("beta_summary.json"))?, &summary)?;
    println!("N_bar_star = {}", plan.n_bar);
    println!("gamma = {:?}", plan.model.beta.gamma);
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load(&args.common, Some(&args.design))?;
    if args.seeds == 0 {
        return Err(Failure::Config("--seeds must be positive".into()));
    }
    let plan = OfflinePlan::build(&cfg, args.common.seed)?;
    let xi = plan.xi.clone().map_err(|reason| Failure::Config(format!("no trigger margin: {reason}")))?;
    let out = &args.output.out;
    fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Failure::Other(e.to_string()))?;
    let seeds: Vec<u64> = (args.common.seed..args.common.seed + args.seeds).collect();
    let runs = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| -> Result<serde_json::Value, Failure> {
                let schedule = etl::sample_run_schedule(&cfg, &plan.k0, seed)?;
                let run_cfg = EtlConfig { exp: cfg.clone(), k0: plan.k0.clone(), n_bar: plan.n_bar, xi, seed };
                let log = etl::run(&run_cfg, &schedule)?;
                let base = etl::run_baseline(&run_cfg, &schedule)?;
                let dir = out.join(format!("seed_{seed}"));
                fs::create_dir_all(&dir)?;
                log.write_csv(create(&dir.join("run_etl.csv"))?)?;
                base.write_csv(create(&dir.join("run_baseline.csv"))?)?;
                Ok(json!({
                    "seed": seed,
                    "horizon": schedule.horizon(),
                    "baseline_total_cost": base.total_cost(),
                    "cost_ratio": base.total_cost() / log.total_cost(),
                    "etl": log.summary(),
                }))
            })
            .collect::<Result<Vec<_>, Failure>>()
    })?;
    let mut ratios: Vec<f64> = runs.iter().map(|r| r["cost_ratio"].as_f64().unwrap_or(f64::NAN)).collect();
    ratios.sort_by(f64::total_cmp);
    let median = etl_lqr::trigger::quantile(&ratios, 0.5);
    let mean = |key: &dyn Fn(&serde_json::Value) -> f64| runs.iter().map(key).sum::<f64>() / runs.len() as f64;
    let mean_etl = mean(&|r| r["etl"]["total_cost"].as_f64().unwrap_or(f64::NAN));
    let mean_base = mean(&|r| r["baseline_total_cost"].as_f64().unwrap_or(f64::NAN));
    let summary = json!({
        "config": cfg.name,
        "plan": plan_json(&plan),
        "median_cost_ratio": median,
        "mean_etl_total_cost": mean_etl,
        "mean_baseline_total_cost": mean_base,
        "runs": runs,
    });
    serde_json::to_writer_pretty(create(&out.join("summary.json"))?, &summary)?;
    println!("N_bar_star = {}", plan.n_bar);
    println!("median baseline/etl cost ratio = {median:?}");
    println!("mean etl / baseline total cost = {mean_etl:?} / {mean_base:?}");
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> Result<(), Failure> {
    let cfg = load(&args.common, None)?;
    let opts = ValidateOptions { seed: args.common.seed, tolerance: args.tolerance, ..ValidateOptions::default() };
    let report = run_oracles(&cfg, &opts)?;
    for c in &report {
        println!(
            "{} {}: error {:?} tolerance {:?} ({:.3} s)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.error,
            c.tolerance,
            c.seconds
        );
    }
    if report.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Oracle)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Beta(a) => cmd_beta(a),
        Command::Run(a) => cmd_run(a),
        Command::Validate(a) => cmd_validate(a),
        Command::DumpPreset { name } => preset_text(name).map(|t| print!("{t}")).map_err(|e| {
            let known: Vec<_> = preset_names().collect();
            Failure::Config(format!("{e} (known: {})", known.join(", ")))
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Oracle) => {
            eprintln!("oracle checks failed");
            ExitCode::from(3)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
