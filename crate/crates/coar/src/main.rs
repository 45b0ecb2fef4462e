use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = coar::cli::Cli::parse();
    match coar::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
