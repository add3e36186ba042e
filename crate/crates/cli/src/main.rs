use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use recurdet_cli::commands::{run, Cli};

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("RECURDET_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
