mod commands;
mod config;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;
use descry_core::ErrorKind;

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Input,
            message: message.into(),
        }
    }

    pub fn consistency(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Consistency,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl<E: Into<descry_core::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e: descry_core::Error = e.into();
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = commands::Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
