use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tslm_cli::{cmd_eval, cmd_gen_toy, cmd_report, cmd_train, parse_sizes};

#[derive(Parser)]
#[command(name = "tslm")]
#[command(about = "Train and evaluate a desk-scale time-series language model")]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Generate the synthetic toy task suite
    GenToy {
        /// Generator seed
        #[arg(long, default_value = "7")]
        seed: u64,
        /// Output directory (dataset.jsonl, sidecars, manifest.json)
        #[arg(long)]
        out: PathBuf,
        /// Per-family counts, e.g. forecasting=50,classification=10
        #[arg(long, default_value = "")]
        sizes: String,
    },
    /// Train a model from a run config
    Train {
        /// Run config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Output directory (checkpoint.tok1, losses.csv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over a dataset
    Eval {
        /// Run config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// Output directory (eval.json, report.txt, manifest.json)
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge evaluation runs into one cross-model report
    Report {
        /// Run directories, each containing an eval.json
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output directory (report.json, report.txt)
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Commands::GenToy { seed, out, sizes } => {
            parse_sizes(&sizes).and_then(|sizes| cmd_gen_toy(seed, &out, &sizes))
        }
        Commands::Train { config, out } => cmd_train(&config, &out),
        Commands::Eval { config, checkpoint, data, out } => {
            cmd_eval(&config, &checkpoint, &data, &out)
        }
        Commands::Report { runs, out } => cmd_report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
