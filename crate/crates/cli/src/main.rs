//! `reltrans` command-line driver.

mod commands;

use std::process::ExitCode;

use clap::Parser;

/// Exit status for a check that ran and found a failure.
pub const EXIT_VALIDATION: u8 = 1;
/// Exit status for bad input, I/O problems and other runtime errors.
pub const EXIT_RUNTIME: u8 = 2;

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    env_logger::Builder::new().filter_level(cli.verbosity()).format_timestamp(None).parse_default_env().init();
    match commands::run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VALIDATION),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
