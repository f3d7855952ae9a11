//! Command-line workbench around [`iforge_core`]: configuration, synthetic
//! data, persistence, parallel theorem checks and report emission.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage / configuration / input
//! error.

use std::ffi::OsString;
use std::path::PathBuf;

pub mod cli;
pub mod commands;
pub mod config;
pub mod io;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum WbError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {msg}")]
    Config { msg: String, help: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Core(#[from] iforge_core::Error),
}

/// What a command produced, for the exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    ChecksFailed,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Output goes to stdout, diagnostics to stderr.
pub fn cli_run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = match config::parse(argv) {
        Ok(Some(cmd)) => cmd,
        Ok(None) => return EXIT_OK,
        Err(e) => return report_error(&e),
    };
    match commands::run(&cmd) {
        Ok(Outcome::Ok) => EXIT_OK,
        Ok(Outcome::ChecksFailed) => EXIT_CHECK_FAILED,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &WbError) -> i32 {
    match e {
        // clap already renders a complete message
        WbError::Usage(msg) if msg.starts_with("error:") => eprint!("{msg}"),
        _ => eprintln!("iforge: {e}"),
    }
    if let WbError::Config { help, .. } = e {
        eprintln!("\nexpected configuration (JSON, unknown keys rejected):\n{help}");
    }
    EXIT_USAGE
}
