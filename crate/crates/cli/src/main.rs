//! `hbvi`: generate data, train variational families, evaluate and convert
//! checkpoints, and run the self-test suite.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hbvi::families::{FamilyKind, Structure};

use crate::config::{ModelKind, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "hbvi",
    version,
    about = "Variational inference for hierarchical branch models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for estimators and metrics (0 uses every core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    iters: Option<u64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// joint, branch or amortized.
    #[arg(long, global = true)]
    family: Option<FamilyKind>,
    /// dense, block or diag.
    #[arg(long, global = true)]
    structure: Option<Structure>,
    /// synthetic or preference.
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    /// Draws used by `eval`.
    #[arg(long, global = true)]
    k_samples: Option<usize>,
    /// Dataset container path (default `<out-dir>/dataset.bin`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Checkpoint path (default `<out-dir>/checkpoint.bin`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Any config key, as `key=value`; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a dataset: a synthetic forward sample with its latents and
    /// oracle, or preprocessed ratings.
    Generate,
    /// Optimize a variational family; writes a trace and a checkpoint.
    Train,
    /// Compute likelihood metrics of a checkpoint.
    Eval,
    /// Turn a dense joint checkpoint into a branch checkpoint.
    Convert,
    /// Run the fast invariant suite.
    Check,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.workers {
        cfg.workers = v;
    }
    if let Some(v) = &cli.out_dir {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = cli.iters {
        cfg.iters = v;
    }
    if let Some(v) = cli.batch_size {
        cfg.batch_size = Some(v);
    }
    if let Some(v) = cli.family {
        cfg.family = v;
    }
    if let Some(v) = cli.structure {
        cfg.structure = v;
    }
    if let Some(v) = cli.model {
        cfg.model = v;
    }
    if let Some(v) = cli.k_samples {
        cfg.k_samples = v;
    }
    if let Some(v) = &cli.data {
        cfg.data = Some(v.clone());
    }
    if let Some(v) = &cli.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = resolve(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("building the worker pool")?;
    pool.install(|| match cli.command {
        Command::Generate => commands::generate(&cfg).map(|_| true),
        Command::Train => commands::train_cmd(&cfg).map(|_| true),
        Command::Eval => commands::eval_cmd(&cfg).map(|_| true),
        Command::Convert => commands::convert_cmd(&cfg).map(|_| true),
        Command::Check => Ok(commands::check_cmd()),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
