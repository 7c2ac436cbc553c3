use std::error::Error as _;
use std::process::ExitCode;

use clap::Parser;
use xgap_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match xgap_cli::init_threads().and_then(|()| xgap_cli::execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = e.source();
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
