//! `unlearn-forge <verb> [--config PATH] [--seed N] [--out DIR]`
//!
//! Exit status: 0 on success, 2 when a prerequisite file is missing, 3 when
//! a loss or gradient diverges, 1 for any other error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use unlearn_forge::harness::{exit_code, manifest_config, parse_config, run_command, RunConfig, Verb};
use unlearn_forge::{Error, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// Train the base diffusion model on the contaminated dataset.
    TrainBase,
    /// Run the configured unlearning method from the base checkpoint.
    Unlearn,
    /// Sample the run's model and write metrics.
    Eval,
    /// Aggregate every evaluated run below `--out`.
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "unlearn-forge", version, about = "Machine unlearning for small diffusion models")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (TOML). `eval` falls back to `<out>/manifest.json`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(cli: &Cli, verb: Verb) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingPrerequisite(path.clone()));
            }
            parse_config(&fs::read_to_string(path)?)?
        }
        None => {
            let stored = match (&cli.out, verb) {
                (Some(out), Verb::Eval) => manifest_config(out)?,
                _ => None,
            };
            stored.unwrap_or_default()
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn threads() -> Result<()> {
    let Ok(v) = std::env::var("UNLEARN_FORGE_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("UNLEARN_FORGE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verb = match cli.command {
        Command::TrainBase => Verb::TrainBase,
        Command::Unlearn => Verb::Unlearn,
        Command::Eval => Verb::Eval,
        Command::Report => Verb::Report,
    };
    let result = threads().and_then(|()| resolve(&cli, verb)).and_then(|cfg| {
        run_command(verb, &cfg)?;
        eprintln!("{} finished: {}", verb.name(), cfg.out.display());
        Ok(())
    });
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
