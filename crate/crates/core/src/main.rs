use std::process::ExitCode;

use clap::Parser;

use bip_core::cli::{error_exit_code, run, RunSpec};

fn main() -> ExitCode {
    let spec = RunSpec::parse();
    match run(&spec) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error_exit_code(&e) as u8)
        }
    }
}
