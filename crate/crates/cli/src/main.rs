mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// Exit code for invalid invocations (bad flags, conflicting options).
const EXIT_USAGE: u8 = 2;
/// Exit code for failures while running a valid invocation.
const EXIT_RUNTIME: u8 = 1;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("falcon: error[usage]: {first} (run `falcon --help` for usage)");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("falcon: error[{kind}]: {msg}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &anyhow::Error) -> (&'static str, u8) {
    if e.is::<commands::UsageError>() {
        return ("usage", EXIT_USAGE);
    }
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<falcon_core::FalconError>())
        .map_or("io", falcon_core::FalconError::kind);
    (kind, EXIT_RUNTIME)
}
