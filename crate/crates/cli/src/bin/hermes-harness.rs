use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hermes::harness::scenarios::{run_scenario, Mode, ScenarioName, ScenarioSpec};
use tracing::error;

/// Runs the loopback scenarios and writes a JSON report.
#[derive(Parser)]
#[command(name = "hermes-harness", version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// List scenarios and their modes.
    List,
    /// Run one scenario; exits 0 only if every check passes.
    Run {
        scenario: ScenarioName,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        trials: Option<u32>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Skip the random start offset before intermittent trials.
        #[arg(long)]
        no_jitter: bool,
        /// Report path; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    hermes_cli::init_tracing();
    match Args::parse().cmd {
        Cmd::List => {
            for n in ScenarioName::ALL {
                let modes: Vec<&str> = n.modes().iter().map(|m| m.as_str()).collect();
                println!("{:<13} {:<15} {}", n.as_str(), modes.join(","), n.describe());
            }
            ExitCode::SUCCESS
        }
        Cmd::Run { scenario, mode, trials, seed, no_jitter, out } => {
            let mut spec = ScenarioSpec::new(scenario).seed(seed);
            if let Some(m) = mode {
                spec = spec.mode(m);
            }
            if let Some(t) = trials {
                spec = spec.trials(t);
            }
            spec.phase_jitter = !no_jitter;
            let report = match run_scenario(&spec).await {
                Ok(r) => r,
                Err(e) => {
                    error!("{e}");
                    return ExitCode::from(2);
                }
            };
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            match out {
                Some(path) => {
                    if let Err(e) = std::fs::write(&path, json + "\n") {
                        error!("{}: {e}", path.display());
                        return ExitCode::from(2);
                    }
                }
                None => println!("{json}"),
            }
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
