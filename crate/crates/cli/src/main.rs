use std::process::ExitCode;

use clap::Parser;

use travmap_cli::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match travmap_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invalid_input() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
