//! Command-line entry point: dataset preparation, training, evaluation,
//! experiments and verification.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Outcome;

#[derive(Parser, Debug)]
#[command(
    name = "meta-sgcl",
    version,
    about = "Variational sequential recommender with contrastive twin views"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a dataset file from an interaction log or a synthetic generator
    Prepare(commands::PrepareArgs),
    /// Train a model into a run directory
    Train(commands::TrainArgs),
    /// Score a checkpoint (or the popularity baseline) on a split
    Eval(commands::EvalArgs),
    /// Train and evaluate the four loss ablations
    Ablate(commands::ExperimentArgs),
    /// Train on noise-injected copies and evaluate on the clean test split
    Noise(commands::NoiseArgs),
    /// Write a 2-D PCA projection of the item embeddings
    Project(commands::ProjectArgs),
    /// Run the numerical oracle checks; exit 1 if any fails
    Verify(commands::VerifyArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Noise(a) => commands::noise(a),
        Command::Project(a) => commands::project(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                // core errors already embed their source in the message
                if !msg.ends_with(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
