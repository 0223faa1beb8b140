//! `graft`: synthesize a world, build pairs, train, evaluate and map.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graft_core::LossVariant;

use commands::Task;
use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "graft", version, about = "Align satellite tiles with a frozen ground-image embedding space")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.tau=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel loops; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "graft-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world: manifests, rasters, fixtures, class map.
    Synth,
    /// Pair ground images with satellite tiles and write the dataset.
    Build,
    /// Train the tile encoder and write a checkpoint plus loss history.
    Train {
        #[arg(long, value_parser = parse_loss)]
        loss: Option<LossVariant>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the encoder on held-out tiles.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        /// Use ground-truth embeddings in place of the encoder.
        #[arg(long)]
        oracle: bool,
    },
    /// Score every region tile against a text query.
    Map {
        #[arg(long)]
        query: String,
        /// Use ground-truth embeddings in place of the encoder.
        #[arg(long)]
        oracle: bool,
    },
}

fn parse_loss(s: &str) -> Result<LossVariant, String> {
    s.parse().map_err(|e: graft_core::align::AlignError| e.to_string())
}

fn name(c: &Command) -> &'static str {
    match c {
        Command::Synth => "synth",
        Command::Build => "build",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Map { .. } => "map",
    }
}

fn set_threads(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("--threads must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    log::warn!("built without the parallel feature; --threads {n} ignored");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        set_threads(n)?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Train { loss, epochs } = &cli.command {
        if let Some(l) = loss {
            cfg.train.loss = *l;
        }
        if let Some(e) = epochs {
            cfg.train.epochs = *e;
        }
    }
    cfg.resolve(&cli.out);
    let out = cli.out.as_path();
    commands::prepare_out(out, &cfg, name(&cli.command))?;
    match &cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Build => commands::build(&cfg, out),
        Command::Train { .. } => commands::train_cmd(&cfg, out),
        Command::Eval { task, oracle } => commands::eval(&cfg, out, *task, *oracle),
        Command::Map { query, oracle } => commands::map(&cfg, out, query, *oracle),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAFT_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("graft: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
