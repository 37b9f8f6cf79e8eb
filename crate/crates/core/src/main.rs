use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use alma_core::harness::{self, ExperimentConfig, RunOptions};
use alma_core::Error;

#[derive(Parser)]
#[command(name = "alma", version, about = "Train and score learners on a stream of mega-batches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its ledger, summary and checkpoint.
    Run {
        config: PathBuf,
        /// Continue from the checkpoint left by --stop-after.
        #[arg(long)]
        resume: bool,
        /// Checkpoint after arrival N and stop.
        #[arg(long, value_name = "N")]
        stop_after: Option<usize>,
    },
    /// Compare k sequential chunks against one training run on all data.
    AblateSeq {
        config: PathBuf,
        #[arg(long)]
        k: usize,
    },
    /// Merge the summaries and curves of finished runs.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Describe a checkpoint file.
    Inspect { checkpoint: PathBuf },
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("plain data serialises"));
}

fn execute(cli: Cli) -> alma_core::Result<()> {
    match cli.command {
        Command::Run {
            config,
            resume,
            stop_after,
        } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let out = harness::run_experiment(&cfg, RunOptions { resume, stop_after })?;
            match out.summary {
                Some(s) => print_json(&s),
                None => eprintln!(
                    "stopped after arrival {}; resume with --resume",
                    out.ledger.records().len()
                ),
            }
            eprintln!("outputs in {}", out.output_dir.display());
        }
        Command::AblateSeq { config, k } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let data = harness::load_data(&cfg)?;
            print_json(&harness::run_seq_vs_iid(&cfg, k, &data)?);
        }
        Command::Report { dirs } => print_json(&harness::report(&dirs)),
        Command::Inspect { checkpoint } => print_json(&harness::inspect(&checkpoint)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            })
        }
    }
}
