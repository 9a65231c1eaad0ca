use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "fdsim", version, about = "Communication-aware federated distillation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run experiments and write per-run logs, events and checkpoints.
    Run {
        /// TOML config; omitted keys take the desk-scale defaults.
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        /// Replay the config, strategies and seeds recorded in a manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Comma-separated seeds, e.g. `0,1,42`.
        #[arg(long = "seeds", alias = "seed", value_delimiter = ',', conflicts_with = "manifest")]
        seeds: Vec<u64>,
        /// Comma-separated strategies, or `all`.
        #[arg(long = "strategy", value_delimiter = ',', conflicts_with = "manifest")]
        strategies: Vec<String>,
        #[arg(long, conflicts_with = "manifest")]
        rounds: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize communication-to-accuracy over the logs in a directory.
    Report {
        log_dir: PathBuf,
        /// Comma-separated accuracy thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = [0.70, 0.75, 0.79])]
        thresholds: Vec<f64>,
        /// Where to write summary.csv and summary.json; defaults to the log directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-client shard sizes and class histograms.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run brute-force oracle suites against the production code paths.
    Oracle {
        /// topk, aggregation, gradient or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("FDSIM_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("FDSIM_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, manifest, seeds, strategies, rounds, out } => {
            let request = match manifest {
                Some(path) => commands::RunRequest::from_manifest(&path)?,
                None => commands::RunRequest::from_args(config.as_deref(), &seeds, &strategies, rounds)?,
            };
            commands::cmd_run(&request, &out)
        }
        Command::Report { log_dir, thresholds, out } => {
            commands::cmd_report(&log_dir, &thresholds, out.as_deref().unwrap_or(&log_dir))
        }
        Command::Partition { config, seed, out } => commands::cmd_partition(config.as_deref(), seed, out.as_deref()),
        Command::Oracle { suite, seed } => commands::cmd_oracle(&suite, seed),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fdsim: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
