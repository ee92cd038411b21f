//! `epicode` command-line entry point.
//!
//! Machine-readable results go to stdout; progress and diagnostics go to
//! stderr. Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numeric failure.

mod commands;

use std::process::ExitCode;
use std::sync::atomic::{AtomicU8, Ordering};

use clap::{error::ErrorKind, Parser, ValueEnum};

use commands::Command;
use epicode_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum LogLevel {
    Quiet,
    Info,
    Debug,
}

static LOG_LEVEL: AtomicU8 = AtomicU8::new(LogLevel::Info as u8);

/// Writes a diagnostic line to stderr when `level` is enabled.
pub fn log(level: LogLevel, msg: impl AsRef<str>) {
    if level as u8 <= LOG_LEVEL.load(Ordering::Relaxed) {
        eprintln!("{}", msg.as_ref());
    }
}

#[derive(Debug, Parser)]
#[command(name = "epicode", version, about = "Checkpoint extrapolation with contrastive decoding")]
struct Cli {
    /// Worker threads for parallel evaluation and Monte Carlo trials
    /// (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Verbosity of stderr diagnostics.
    #[arg(long, global = true, value_enum, default_value = "info")]
    log_level: LogLevel,

    #[command(subcommand)]
    command: Command,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    LOG_LEVEL.store(cli.log_level as u8, Ordering::Relaxed);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
