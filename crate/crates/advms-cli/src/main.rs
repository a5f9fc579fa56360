//! Command-line harness: train switching pools, attack them, evaluate
//! attack success, sweep the size/budget grid, and render reports.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use advms::{Error, Result};
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "advms",
    about = "Adversarially trained model-switching pools: train, attack, evaluate"
)]
struct Cli {
    /// Config file (key = value under [section] headers); defaults apply
    /// when omitted. A run manifest is also a valid config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config value, e.g. --set pool.m=4. Repeatable;
    /// attack.* overrides apply to every [attack] section.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the pool members and save the pool under the output dir.
    Train,
    /// Attack a saved pool and dump the adversarial batches.
    Attack {
        /// Path to a pool.cfg written by train.
        #[arg(long)]
        pool: PathBuf,
    },
    /// Evaluate clean accuracy and attack success rate of a saved pool.
    Eval {
        /// Path to a pool.cfg written by train.
        #[arg(long)]
        pool: PathBuf,
    },
    /// Evaluate the full pool-size x training-budget grid.
    Sweep,
    /// Render plots and a table from an existing report CSV.
    Report {
        /// Path to a report.csv written by eval or sweep.
        #[arg(long)]
        csv: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.sets {
        cfg.apply_set(assignment)?;
    }
    Ok(cfg.effective())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cfg.run.workers > 0 {
        // Ignore the error if a pool already exists (tests, repeated calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run.workers)
            .build_global();
    }
    match &cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Attack { pool } => commands::cmd_attack(&cfg, pool),
        Command::Eval { pool } => commands::cmd_eval(&cfg, pool),
        Command::Sweep => commands::cmd_sweep(&cfg),
        Command::Report { csv } => commands::cmd_report(&cfg, csv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Argument(_) => 2,
                Error::Format(_) => 3,
                Error::Io(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
