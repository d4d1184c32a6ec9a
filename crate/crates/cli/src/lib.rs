//! Command-line front end: file formats in, reports out, plus an optional
//! client that collects log-probabilities from a scoring endpoint.

pub mod acquire;
pub mod args;
pub mod commands;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use acquire::{AcquireError, LogprobClientConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pepr_core::Error),
    #[error(transparent)]
    Acquire(#[from] AcquireError),
    #[error("{0:#}")]
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) | CliError::Acquire(AcquireError::Core(e)) if e.is_numerical() => {
                EXIT_NUMERICAL
            }
            _ => EXIT_DATA,
        }
    }
}

/// Runs the CLI with the process's standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(
        argv,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match args::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: args::Cli, out: &mut dyn Write) -> Result<(), CliError> {
    use args::Command;
    match args::resolve(cli)? {
        Command::Simulate(a) => commands::simulate(a, out),
        Command::Regress(a) => commands::regress(a, out),
        Command::Predict(a) => commands::predict(a, out),
        Command::Select(a) => commands::select_cmd(a, out),
        Command::Evaluate(a) => commands::evaluate(a, out),
        Command::Acquire(a) => commands::acquire(a, out),
    }
}
