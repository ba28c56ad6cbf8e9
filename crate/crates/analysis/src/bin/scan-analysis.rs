//! `scan-analysis`: statistics over positioner scan archives.
//!
//! Exit status is 0 on success, 2 when an archive cannot be read or parsed,
//! and 1 for any other failure.

use std::process::ExitCode;

use positioner_analysis::cli::{execute, CliError};

fn main() -> ExitCode {
    match execute(std::env::args_os()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(e)) => e.exit(),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
