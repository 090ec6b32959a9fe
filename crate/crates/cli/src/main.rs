use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedpick_cli::commands;

#[derive(Parser)]
#[command(name = "fedpick", version, about = "Federated training with personalized feature selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train all clients and write metrics, summary and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "fedpick-run")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Probe frozen encoder features with Fisher-ranked subsets and KNN.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Mask statistics of a finished fedpick run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
    },
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDPICK_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, workers } => {
            commands::cmd_run(&config, seed, &out, workers.unwrap_or_else(default_workers)).map(|s| {
                println!("mean best accuracy {:.4} (std {:.4})", s.mean_best_accuracy, s.std_best_accuracy);
            })
        }
        Command::Probe { config, seed, out, workers } => {
            commands::cmd_probe(&config, seed, &out, workers.unwrap_or_else(default_workers)).map(|rows| {
                println!("wrote {} probe rows", rows.len());
            })
        }
        Command::Analyze { run } => commands::cmd_analyze(&run).map(|a| {
            println!("analyzed {} clients", a.selection_ratio.len());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
