use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ambientflow_cli::commands::{self, EvaluateArgs, ReconstructArgs, SampleArgs, SimulateArgs, TheoryCmd, TrainArgs};
use ambientflow_cli::{error_json, exit_code};

#[derive(Parser)]
#[command(name = "ambientflow", version, about = "Normalizing flows from noisy, incomplete measurements")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a prior (and posterior network) from a JSON experiment config.
    Train(TrainArgs),
    /// Draw samples from a trained prior or posterior network.
    Sample(SampleArgs),
    /// Generate test objects and their measurements for a checkpoint.
    Simulate(SimulateArgs),
    /// Reconstruct objects from measurements.
    Reconstruct(ReconstructArgs),
    /// Write a CSV metric table.
    Evaluate(EvaluateArgs),
    /// Exact small-instance checks of the theory.
    #[command(subcommand)]
    Theory(TheoryCmd),
    /// Print the JSON schema of experiment configs.
    Schema {
        /// Write the schema here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

const SCHEMA: &str = include_str!("../schema/experiment.schema.json");

fn run(cli: Cli) -> ambientflow::Result<()> {
    match cli.cmd {
        Cmd::Train(a) => commands::train(&a),
        Cmd::Sample(a) => commands::sample(&a),
        Cmd::Simulate(a) => commands::simulate(&a),
        Cmd::Reconstruct(a) => commands::reconstruct(&a),
        Cmd::Evaluate(a) => commands::evaluate(&a),
        Cmd::Theory(t) => {
            println!("{}", commands::theory(&t)?);
            Ok(())
        }
        Cmd::Schema { out: Some(p) } => Ok(std::fs::write(p, SCHEMA)?),
        Cmd::Schema { out: None } => {
            print!("{SCHEMA}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": "arguments", "exit_code": 2, "message": e.to_string() });
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
