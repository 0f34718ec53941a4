use std::process::ExitCode;

use clap::Parser;
use tforge::cli::{run, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TFORGE_LOG", "warn")).init();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    match run(&cli, std::env::vars(), &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tforge: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
