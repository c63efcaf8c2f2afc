//! Batch CLI for the trajectory-synthesis pipeline.
//!
//! Exit codes: 0 ok, 1 partial (some pairs degraded or failed),
//! 2 fatal (config or IO errors).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Outcome;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "reer",
    about = "Recover reasoning trajectories from (query, solution) pairs by \
             perplexity-guided local search, then filter and assemble training data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the search over every input pair and emit synthesis records.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config worker-pool size.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Attach quality-filter verdicts to synthesis records.
    Filter {
        #[arg(long)]
        config: PathBuf,
        /// Records JSONL; defaults to <output_dir>/records.jsonl.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Assemble training records from filtered synthesis records.
    Assemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        records: Option<PathBuf>,
        /// Rate each assembled record with the remote judge.
        #[arg(long)]
        judge: bool,
    },
    /// Compute the statistics report for synthesis records.
    Stats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Re-score final trajectories with the configured scorer.
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Run the fully offline pipeline over the shipped fixture corpus.
    Demo {
        /// Output directory.
        #[arg(long, default_value = "demo_out")]
        out: PathBuf,
        /// Overrides the shipped reference seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_validated(path: &std::path::Path, needs_input: bool) -> anyhow::Result<RunConfig> {
    let config = RunConfig::load(path)?;
    let problems = config.validate(needs_input);
    if !problems.is_empty() {
        for problem in &problems {
            eprintln!("config error: {problem}");
        }
        anyhow::bail!("{} config validation error(s)", problems.len());
    }
    Ok(config)
}

fn run() -> anyhow::Result<Outcome> {
    match Cli::parse().command {
        Command::Synthesize {
            config,
            seed,
            workers,
        } => {
            let mut config = load_validated(&config, true)?;
            if let Some(seed) = seed {
                config.search.seed = seed;
            }
            let workers = workers.unwrap_or(config.workers);
            commands::cmd_synthesize(&config, workers)
        }
        Command::Filter { config, records } => {
            let config = load_validated(&config, false)?;
            commands::cmd_filter(&config, &records)
        }
        Command::Assemble {
            config,
            records,
            judge,
        } => {
            let config = load_validated(&config, true)?;
            commands::cmd_assemble(&config, &records, judge)
        }
        Command::Stats { config, records } => {
            let config = load_validated(&config, false)?;
            commands::cmd_stats(&config, &records)
        }
        Command::Score { config, records } => {
            let config = load_validated(&config, true)?;
            commands::cmd_score(&config, &records)
        }
        Command::Demo { out, seed } => commands::cmd_demo(&out, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(outcome) => ExitCode::from(outcome.code() as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
