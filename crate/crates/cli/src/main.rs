use std::process::ExitCode;

use cfdist_cli::commands::{cmd_benchmark, cmd_diagnose, cmd_fit, cmd_simulate, describe};
use cfdist_cli::{CliError, CliResult, Overrides};
use clap::{Parser, Subcommand};

/// Interventional distributions with an instrument and a continuous
/// treatment, estimated with a control function.
///
/// Settings come from a TOML or JSON file (--config) and/or flags; flags win.
/// Exit codes: 0 success, 1 configuration error, 2 runtime or stage error,
/// 3 partial benchmark failure.
#[derive(Parser)]
#[command(name = "cfdist", version)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write observational CSVs for each setting and replication.
    Simulate(Overrides),
    /// Fit the pipeline (or a baseline) and write curve CSVs.
    Fit(Overrides),
    /// Replicated simulate, fit, oracle and score sweep.
    Benchmark(Overrides),
    /// First-stage goodness-of-fit checks.
    Diagnose(Overrides),
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(o) => {
            let cfg = o.resolve()?;
            let s = cmd_simulate(&cfg)?;
            println!("wrote {} datasets to {}", s.files.len(), cfg.output.join("data").display());
        }
        Command::Fit(o) => {
            let cfg = o.resolve()?;
            for r in cmd_fit(&cfg)? {
                println!("{}: {}", r.estimator, r.files.join(", "));
            }
            println!("output in {}", cfg.output.display());
        }
        Command::Benchmark(o) => {
            let cfg = o.resolve()?;
            let result = cmd_benchmark(&cfg);
            if let Ok(r) = &result {
                for a in r.aggregate() {
                    println!("{:<28} {:<22} {:<18} {:.5} (sd {:.5}, {} reps)", a.setting, a.method, a.metric, a.mean, a.sd, a.replications);
                }
            }
            println!("output in {}", cfg.output.display());
            result?;
        }
        Command::Diagnose(o) => {
            let cfg = o.resolve()?;
            let report = cmd_diagnose(&cfg)?;
            for line in describe(&report) {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Stage { source, .. } = &e {
                log::debug!("{source:?}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
