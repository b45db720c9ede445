use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = nitsche::cli::Cli::parse();
    match nitsche::cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
