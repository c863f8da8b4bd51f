use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = acrnn_cli::Cli::parse();
    match acrnn_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(acrnn_cli::exit_code(&err))
        }
    }
}
