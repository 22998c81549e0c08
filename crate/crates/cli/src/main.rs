//! `spvt` binary.

use std::process::ExitCode;

use clap::Parser;
use spvt_cli::commands::{self, Cli, CliError, EXIT_IO};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli).map_err(anyhow::Error::from) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(EXIT_IO, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
