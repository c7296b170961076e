use std::process::ExitCode;

use clap::Parser;
use gpoe::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap exits 2 on usage errors and 0 for --help/--version
            e.exit();
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gpoe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
