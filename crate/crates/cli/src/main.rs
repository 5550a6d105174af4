use std::path::PathBuf;
use std::process::ExitCode;

use batchaug_cli::{run, CliError, Command, ExperimentConfig};
use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Cmd {
    Train,
    Dynamics,
    Correlate,
    Throughput,
    Distsim,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Dynamics => Command::Dynamics,
            Cmd::Correlate => Command::Correlate,
            Cmd::Throughput => Command::Throughput,
            Cmd::Distsim => Command::Distsim,
        }
    }
}

/// Batch augmentation experiments.
///
/// Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 training diverged,
/// 4 distributed equivalence failure. `BATCHAUG_THREADS` caps the worker threads.
#[derive(Debug, Parser)]
#[command(name = "batchaug", version)]
struct Args {
    command: Cmd,
    /// Experiment configuration (`[section]` / `key = value`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Replaces every run seed (the dataset seed is kept).
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value`, applied after the file; may repeat.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("BATCHAUG_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "BATCHAUG_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(e.to_string()))
}

fn main_inner(args: Args) -> Result<String, CliError> {
    configure_threads()?;
    let mut cfg = ExperimentConfig::load(&args.config)?;
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = args.seed {
        cfg.reseed(seed);
    }
    Ok(run(args.command.into(), &cfg, &args.out)?.summary)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match main_inner(args) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("batchaug: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
