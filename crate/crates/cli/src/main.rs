//! `swarm`: train, evaluate and compare multi-agent image classifiers.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 dataset error, 4 checkpoint error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use swarm_core::config::{ConfigError, Consensus, RunConfig};
use swarm_core::graph::GraphSpec;
use swarm_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(
    name = "swarm",
    version,
    about = "Multi-agent image classification with learned messaging"
)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` assignment applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run both training stages.
    Train,
    /// Evaluate a checkpoint on the test set.
    Eval(EvalArgs),
    /// Train one run per (f, T) cell.
    Sweep(SweepArgs),
    /// Train a comparison model.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
    },
    /// Record every agent's messages along sampled test trajectories.
    DumpMessages(DumpArgs),
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    /// Defaults to `final.ckpt` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long, value_parser = parse_consensus)]
    consensus: Option<Consensus>,
    #[arg(long, value_parser = parse_graph)]
    graph: Option<GraphSpec>,
    /// Action source; defaults to the one used by the last trained stage.
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
}

#[derive(Debug, clap::Args)]
struct SweepArgs {
    #[arg(long = "f", value_delimiter = ',', required = true)]
    frames: Vec<usize>,
    #[arg(long = "T", value_delimiter = ',', required = true)]
    horizons: Vec<usize>,
    /// Seeds per cell; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Cells trained at once.
    #[arg(long, default_value_t = 1)]
    parallel_cells: usize,
}

#[derive(Debug, clap::Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 9)]
    horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    Centralized,
    RandomWalkDistributed,
    NoComm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Learned,
    Uniform,
}

fn parse_consensus(s: &str) -> Result<Consensus, String> {
    s.parse::<Consensus>().map_err(|e| e.to_string())
}

fn parse_graph(s: &str) -> Result<GraphSpec, String> {
    s.parse::<GraphSpec>().map_err(|e| e.to_string())
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let train = match self {
            CliError::Config(_) => return 2,
            CliError::Train(e) => e,
        };
        match train {
            TrainError::Config(_) => 2,
            TrainError::Data(_) => 3,
            TrainError::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &cli.overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            ConfigError::Invalid(format!("--set expects KEY=VALUE, got {item:?}"))
        })?;
        let key = key.trim();
        cfg.set(key, value.trim())
            .map_err(|reason| ConfigError::Value {
                line: 0,
                key: key.to_string(),
                reason,
            })?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Train => commands::train(&cfg)?,
        Command::Eval(args) => commands::eval(&cfg, args)?,
        Command::Sweep(args) => commands::sweep(&cfg, args)?,
        Command::Baseline { kind } => commands::baseline(&cfg, *kind)?,
        Command::DumpMessages(args) => commands::dump(&cfg, args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
