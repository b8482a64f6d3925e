//! `inpaint`: mask generation, training, inference, evaluation and
//! detector visualization.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::Globals;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    let result = match &cli.command {
        Command::Genmasks(a) => commands::genmasks(&globals, a),
        Command::Train(a) => commands::train(&globals, a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(&globals, a),
        Command::Visualize(a) => commands::visualize(&globals, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
