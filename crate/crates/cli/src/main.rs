//! Command-line front end. Exit codes: 0 on success, 1 on a runtime failure,
//! 2 on a usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "factgauntlet",
    version,
    about = "Poisoning attacks and defenses for retrieval-backed fact checkers"
)]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, default_value = "config.toml")]
    config: PathBuf,
    /// Directory for caches and run artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. --set k=10 or --set embedder.dim=64.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Record full LLM transcripts in per-claim reports.
    #[arg(long, global = true)]
    trace: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Probe the victim on every targetable claim and cache the reports.
    Probe,
    /// Generate poison sets for every configured attack.
    Attack,
    /// Run the attack-by-rate grid and write metrics, claim rows, and p-values.
    Evaluate,
    /// Render result tables for finished runs.
    Report {
        /// Run ids under <out>/results to include.
        #[arg(required = true)]
        run_ids: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(run(cli));
}

fn run(cli: Cli) -> i32 {
    if let Command::Report { run_ids } = &cli.command {
        return match commands::cmd_report(&cli.out, run_ids) {
            Ok(()) => 0,
            Err(err) => {
                eprintln!("error: {err:#}");
                1
            }
        };
    }

    let config = match config::load_run_config(&cli.config, &cli.set, cli.seed) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: {err:#}");
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Probe => commands::cmd_probe(&config, &cli.out),
        Command::Attack => commands::cmd_attack(&config, &cli.out),
        Command::Evaluate => commands::cmd_evaluate(&config, &cli.out, cli.trace).map(|_| ()),
        Command::Report { .. } => unreachable!("handled above"),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<commands::UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}
