//! `timelyrec` command-line interface.

mod commands;
mod explain;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// Exit status for malformed input, configuration or data.
const EXIT_INPUT: u8 = 2;
/// Exit status for NaN or infinity during computation.
const EXIT_NUMERIC: u8 = 3;
/// Exit status for infeasible negative sampling.
const EXIT_SAMPLING: u8 = 4;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<timelyrec::Error>() {
                Some(timelyrec::Error::Numeric(_)) => EXIT_NUMERIC,
                Some(timelyrec::Error::Sampling(_)) => EXIT_SAMPLING,
                _ => EXIT_INPUT,
            };
            ExitCode::from(code)
        }
    }
}
