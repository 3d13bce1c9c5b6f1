//! `landuse`: simulate, fit and compare land-use filtered spatial ordinal
//! models from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use landuse_core::ModelKind;

use crate::config::{Overrides, Source};

#[derive(Parser, Debug)]
#[command(name = "landuse", version, about = "Land-use filtered spatial ordinal regression")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Model family: `filter` or `stationary`.
    #[arg(long, global = true, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// Keep every n-th chain draw after burn-in.
    #[arg(long, global = true)]
    thin: Option<usize>,
    /// Chain iterations discarded before storing draws.
    #[arg(long = "burn-in", global = true)]
    burn_in: Option<usize>,
    /// Chain iterations after the pilot phase.
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Recode ratings `k -> K + 1 - k` on ingestion.
    #[arg(long = "reverse-scale", global = true)]
    reverse_scale: bool,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a training set and a categorized grid from the scenario.
    Simulate,
    /// Run the MCMC sampler and write posterior draws.
    FitMcmc,
    /// Fit the approximate Gaussian model by MAP.
    FitMap,
    /// Predict the latent surface at the grid.
    Predict {
        /// Predict from MCMC draws or from a MAP fit.
        #[arg(long, value_enum)]
        source: Option<Source>,
    },
    /// WAIC from posterior draws.
    Waic,
    /// Filter-versus-stationary simulation study.
    Compare,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: landuse_core::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} workers: {e}");
            return ExitCode::FAILURE;
        }
    }
    let source = match &cli.command {
        Command::Predict { source } => *source,
        _ => None,
    };
    let ov = Overrides {
        seed: cli.seed,
        model: cli.model,
        thin: cli.thin,
        burn_in: cli.burn_in,
        iters: cli.iters,
        reverse_scale: cli.reverse_scale,
        output_dir: cli.out.clone(),
        source,
    };
    let name = match cli.command {
        Command::Simulate => "simulate",
        Command::FitMcmc => "fit-mcmc",
        Command::FitMap => "fit-map",
        Command::Predict { .. } => "predict",
        Command::Waic => "waic",
        Command::Compare => "compare",
    };
    match commands::run(name, cli.config.as_deref(), &ov) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
