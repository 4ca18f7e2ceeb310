//! The `fpm` command-line driver: dataset synthesis, training, evaluation,
//! mutual-information analysis and report rendering.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

pub mod args;
pub mod artifacts;
pub mod commands;
pub mod failure;
pub mod render;

use args::{Cli, Command};
use failure::CliResult;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Train(a) => commands::train_command(a),
        Command::Eval(a) => commands::eval_command(a),
        Command::Mi(a) => commands::mi_command(a),
        Command::Report(a) => commands::report_command(a),
    }
}
