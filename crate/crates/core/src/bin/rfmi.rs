use std::process::ExitCode;

use clap::Parser;
use rfmi::cli::{exit_code, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: anyhow::Result<()> = run(&cli).map_err(anyhow::Error::from);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<rfmi::Error>().map(exit_code).unwrap_or(1);
            ExitCode::from(code)
        }
    }
}
