//! `gpbart` command-line tool: fit, predict, simulate and benchmark.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::{Flags, Settings};

#[derive(Parser, Debug)]
#[command(name = "gpbart", version, about = "Sum-of-trees regression with Gaussian process leaves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a model and write the posterior, tau trace, acceptance table and summary.
    Fit(Flags),
    /// Predict from a saved posterior.
    Predict(Flags),
    /// Write a synthetic data set and its metadata sidecar.
    Simulate(Flags),
    /// Cross-validate variants on a synthetic or supplied data set.
    Benchmark(Flags),
}

fn run(cmd: &Command) -> gpbart::Result<()> {
    match cmd {
        Command::Fit(f) => commands::fit(&Settings::resolve("fit", f)?),
        Command::Predict(f) => commands::predict(&Settings::resolve("predict", f)?),
        Command::Simulate(f) => commands::simulate(&Settings::resolve("simulate", f)?),
        Command::Benchmark(f) => commands::benchmark(&Settings::resolve("benchmark", f)?),
    }
}

/// 1 for validation errors, 2 for numeric failures.
fn exit_code(e: &gpbart::Error) -> u8 {
    if e.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
