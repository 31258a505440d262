use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vfl_core::data::{write_dataset, GeneratorSpec};
use vfl_core::experiments::{
    cross_validate, evaluate_saved, exit_code, export_density, fit_experiment, generate_with_meta, load_generator,
    oracle_experiment, write_density, ExperimentConfig, OracleReport,
};
use vfl_core::federation::RunStatus;
use vfl_core::models::Family;
use vfl_core::{Error, Result};

/// Exit status when a run finished its outputs but stopped on a numerical failure.
const NUMERICAL_EXIT: u8 = 3;

#[derive(Parser)]
#[command(name = "vfl", version, about = "Bayesian inference for vertically partitioned data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it as a dataset directory.
    Generate(GenerateArgs),
    /// Fit a model from an experiment config.
    Fit(FitArgs),
    /// Cross-validate a config, or score a saved fit on a dataset directory.
    Evaluate(EvaluateArgs),
    /// Exact or grid-quadrature posterior for the configured model and data.
    Oracle(ConfigArgs),
    /// Draws from one parameter's fitted marginal, for density plots.
    ExportDensity(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    LinearGaussian,
    Logistic,
    PoissonMultilevel,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::LinearGaussian => Family::LinearGaussian,
            FamilyArg::Logistic => Family::Logistic,
            FamilyArg::PoissonMultilevel => Family::PoissonMultilevel,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator TOML, or an experiment config with a generated data source.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    n: Option<usize>,
    /// Covariates per client, e.g. `10,10`.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` (and `VFL_OUTPUT_DIR`).
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Cross-validate this config.
    #[arg(long, conflicts_with_all = ["fit", "data"])]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Run directory written by `fit`.
    #[arg(long, requires = "data")]
    fit: Option<PathBuf>,
    /// Dataset directory to score the fit on.
    #[arg(long, requires = "fit")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Parameter name as in `samples.csv`; repeat for several.
    #[arg(long = "param", required = true)]
    params: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the fit directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: &Path, output_dir: Option<PathBuf>, iterations: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(d) = output_dir {
        cfg.output_dir = Some(d);
    }
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn generate(a: GenerateArgs) -> Result<u8> {
    let mut spec = match &a.spec {
        Some(p) => load_generator(p)?,
        None => GeneratorSpec::default(),
    };
    if let Some(f) = a.family {
        spec.family = f.into();
    }
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(b) = a.blocks {
        spec.block_sizes = b;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.noise_sd {
        spec.noise_sd = s;
    }
    let (data, meta) = generate_with_meta(&spec)?;
    write_dataset(&a.out, &data, &meta)?;
    println!("wrote {} rows, blocks {:?} to {}", data.n(), data.block_sizes(), a.out.display());
    Ok(0)
}

fn fit(a: FitArgs) -> Result<u8> {
    let cfg = load_config(&a.config.config, a.config.output_dir, a.iterations)?;
    info!("fitting {} with {:?} for {} iterations", cfg.name, cfg.algorithm, cfg.iterations);
    let s = fit_experiment(&cfg)?;
    if let Some(e) = s.meta.final_elbo {
        println!("final ELBO (mean of last 100 iterations): {e:.4}");
    }
    println!("outputs in {}", s.dir.display());
    match s.meta.status {
        RunStatus::Completed => Ok(0),
        RunStatus::Aborted { iteration, actor, detail } => {
            eprintln!("error: numerical failure at iteration {iteration} on {actor}: {detail}");
            Ok(NUMERICAL_EXIT)
        }
    }
}

fn evaluate(a: EvaluateArgs) -> Result<u8> {
    if let Some(path) = &a.config {
        let cfg = load_config(path, a.output_dir, a.iterations)?;
        let r = cross_validate(&cfg, true)?;
        if r.synthetic_table {
            eprintln!("note: no heart CSV found; evaluated on the synthetic stand-in table");
        }
        println!("{}", r.metrics.render());
        println!("outputs in {}", cfg.output_dir().display());
        if !r.aborted.is_empty() {
            eprintln!("error: fits of folds {:?} stopped on a numerical failure", r.aborted);
            return Ok(NUMERICAL_EXIT);
        }
        return Ok(0);
    }
    let (Some(fit), Some(data)) = (&a.fit, &a.data) else {
        return Err(Error::Config("evaluate needs --config, or both --fit and --data".into()));
    };
    let (test, _) = vfl_core::data::read_dataset(data)?;
    let report = evaluate_saved(fit, &test, a.samples, a.threshold, a.seed)?;
    let out = a.output_dir.unwrap_or_else(|| fit.clone());
    fs::create_dir_all(&out)?;
    fs::write(out.join("eval_metrics.json"), report.to_json()?)?;
    println!("{}", report.render());
    Ok(0)
}

fn oracle(a: ConfigArgs) -> Result<u8> {
    let cfg = load_config(&a.config, a.output_dir, None)?;
    match oracle_experiment(&cfg, true)? {
        OracleReport::Linear(o) => {
            for r in std::iter::once(&o.exact).chain(&o.sweep) {
                println!("rho {:<5} sd {:?}", r.rho, r.std);
            }
        }
        OracleReport::Grid(g) => {
            println!("mean {:?} sd {:?} half-grid integral {:.6}", g.mean, g.std, g.half_grid_integral);
        }
    }
    println!("wrote {}", cfg.output_dir().join("oracle.json").display());
    Ok(0)
}

fn export(a: ExportArgs) -> Result<u8> {
    let out = a.out.unwrap_or_else(|| a.fit.clone());
    fs::create_dir_all(&out)?;
    for p in &a.params {
        let e = export_density(&a.fit, p, a.draws, a.seed)?;
        let path = write_density(&out, &e)?;
        println!("wrote {}", path.display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Fit(a) => fit(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Oracle(a) => oracle(a),
        Command::ExportDensity(a) => export(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
