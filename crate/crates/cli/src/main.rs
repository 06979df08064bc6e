mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;
use log::error;

use args::Cli;

/// Outcome of a failed subcommand, mapped onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configs, flags or inputs (exit 1).
    Validation(String),
    /// A computation failed on valid inputs (exit 2).
    Runtime(String),
}

impl From<sslprof_core::Error> for Failure {
    fn from(e: sslprof_core::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn init_workers() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("SSLPROF_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Validation(format!("SSLPROF_NUM_WORKERS={raw:?} must be a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = init_workers().and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            error!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            error!("{msg}");
            ExitCode::from(2)
        }
    }
}
