mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use touchloc::{Error, ErrorClass};

use config::RunConfig;

/// Tactile localization of a known object from contact shapes.
#[derive(Parser)]
#[command(name = "touchloc", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the depth image and contact shape at the configured pose.
    Render,
    /// Build the pose grid and encode it.
    BuildGrid,
    /// Train a contrastive encoder on the grid.
    TrainEncoder,
    /// Posterior over grid poses for one query contact shape.
    Localize,
    /// Fused posterior for simultaneous contacts of several sensors.
    Fuse,
    /// Run the configured benchmark.
    Evaluate,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Geometry => 3,
        ErrorClass::Io => 4,
        ErrorClass::Numerical => 5,
    }
}

fn run(cli: &Cli) -> touchloc::Result<()> {
    let path = cli.config.as_ref().ok_or_else(|| Error::InvalidConfig("--config is required".into()))?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidConfig("--threads must be at least 1".into()));
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = RunConfig::load(path)?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    match cli.command {
        Command::Render => commands::render(&cfg),
        Command::BuildGrid => commands::build_grid(&cfg),
        Command::TrainEncoder => commands::train_encoder(&cfg),
        Command::Localize => commands::localize(&cfg),
        Command::Fuse => commands::fuse(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TOUCHLOC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
