use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = privatexr::Cli::parse();
    match privatexr::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
