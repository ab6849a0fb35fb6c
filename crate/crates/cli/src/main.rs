//! `lrp3d`: phantoms, training, prediction, relevance maps and group averages.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
//! failure.

mod aggregate;
mod error;
mod explain;
mod files;
mod pgm;
mod phantom;
mod predict;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lrp3d", version, about = "3D CNN classification with relevance heatmaps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    Phantom(phantom::PhantomArgs),
    Train(train::TrainArgs),
    Predict(predict::PredictArgs),
    Explain(explain::ExplainArgs),
    Aggregate(aggregate::AggregateArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Phantom(a) => phantom::run(a),
        Command::Train(a) => train::run(a),
        Command::Predict(a) => predict::run(a),
        Command::Explain(a) => explain::run(a),
        Command::Aggregate(a) => aggregate::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrp3d: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
