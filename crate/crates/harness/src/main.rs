use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgm_harness::alloc::TrackingAllocator;
use lgm_harness::config::{ExperimentConfig, Method};
use lgm_harness::dataset::write_dataset;
use lgm_harness::experiment::{prepare, run_experiment};
use lgm_harness::oracle::{conjugate_gaussian, linspace, quadrature_1d, quadrature_applies};
use lgm_harness::simulate::simulate;
use lgm_harness::{HarnessError, Result};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "lgm", version, about = "Latent Gaussian model fits: full, recursive and consensus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and its ground truth.
    Simulate(Common),
    /// Full-data fit.
    Fit(Common),
    /// Recursive fit over partitions.
    FitRecursive(Common),
    /// Sequential consensus fit over partitions.
    FitConsensus(Common),
    /// Run every configured method and write the comparison report.
    Compare(Common),
    /// Exact reference posterior (conjugate Gaussian or 1-D quadrature).
    Oracle(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `output_dir`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Partition rule, e.g. `time:10`, `rows:4`, `random:3`.
    #[arg(long)]
    partitions: Option<String>,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.partitions {
            cfg.partitions = Some(p.clone());
        }
        let out = self.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

fn run_methods(c: &Common, only: Option<Method>) -> Result<()> {
    let (mut cfg, out) = c.load()?;
    if let Some(m) = only {
        cfg.methods = vec![m];
        if m == Method::Full {
            cfg.partitions = None;
        }
    }
    cfg.validate()?;
    let result = run_experiment(&cfg, Some(&out))?;
    println!("{}", out.join(lgm_harness::experiment::REPORT_FILE).display());
    let failed = result.outcomes.iter().find_map(|o| o.run.as_ref().err());
    match failed {
        Some(e) => Err(e.clone()),
        None => Ok(()),
    }
}

fn oracle(c: &Common, out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let prepared = prepare(cfg)?;
    let model = &prepared.built.model;
    let theta = model.hyper().values(&model.hyper().initial_free())?;
    let mut report = serde_json::Map::new();
    report.insert("config".into(), c.config.display().to_string().into());
    if model.is_gaussian() {
        let post = conjugate_gaussian(model, &theta)?;
        report.insert(
            "conjugate".into(),
            serde_json::json!({ "mean": post.mean, "sd": post.sds(), "log_evidence": post.log_evidence }),
        );
    }
    if quadrature_applies(model) {
        let us = if model.hyper().n_free() == 1 { linspace(-8.0, 8.0, 1601) } else { vec![] };
        let q = quadrature_1d(model, &us, &linspace(-12.0, 12.0, 4801))?;
        report.insert("quadrature".into(), serde_json::to_value(q)?);
    }
    if report.len() == 1 {
        return Err(HarnessError::Validation("no oracle applies: the model is neither fully Gaussian nor one-dimensional".into()));
    }
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("oracle.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(c) => {
            let (mut cfg, out) = c.load()?;
            cfg.methods = vec![Method::Full];
            cfg.validate()?;
            let (data, truth) = simulate(&cfg.scenario, cfg.seed)?;
            write_dataset(&out, &data, &truth)
        }
        Command::Fit(c) => run_methods(c, Some(Method::Full)),
        Command::FitRecursive(c) => run_methods(c, Some(Method::Recursive)),
        Command::FitConsensus(c) => run_methods(c, Some(Method::Consensus)),
        Command::Compare(c) => run_methods(c, None),
        Command::Oracle(c) => {
            let (mut cfg, out) = c.load()?;
            cfg.methods = vec![Method::Full];
            oracle(c, &out, &cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
