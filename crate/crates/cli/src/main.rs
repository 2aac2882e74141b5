use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfsim::scenario::THREADS_ENV;
use rfsim::{resolve_threads, RunOptions, Scenario, ScenarioError};

#[derive(Parser)]
#[command(name = "rfsim", version, about = "Run pulsed resonance fluorescence scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a TOML config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (overrides RFSIM_THREADS and the config).
        #[arg(long)]
        threads: Option<usize>,
        /// Random seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Parse and validate the config, then exit.
        #[arg(long)]
        validate_only: bool,
    },
}

fn run(cli: Cli) -> Result<(), ScenarioError> {
    let Command::Run {
        config,
        out,
        threads,
        seed,
        validate_only,
    } = cli.command;
    let scenario = Scenario::from_file(&config)?;
    let env = std::env::var(THREADS_ENV).ok();
    let threads = resolve_threads(threads, env.as_deref(), scenario.config().threads)?;
    if validate_only {
        println!("{}: ok", config.display());
        return Ok(());
    }
    let report = scenario.run(&RunOptions {
        out,
        threads: Some(threads),
        seed,
    })?;
    for line in &report.summary {
        println!("{line}");
    }
    println!("wrote {} files to {}", report.outputs.len(), report.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rfsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
