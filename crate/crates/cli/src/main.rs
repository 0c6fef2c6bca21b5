// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evf_harness::{commands, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "evf-harness", version, about = "EVF experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set model.capacity.capacity_factor=2.0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference audit of the training gradient.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Perturb the analytic gradient; the check must then fail.
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Allocation plans of every strategy for a token fixture.
    AllocateTrace {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Lines of `image|text p_lang p_vis`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Staged training on the synthetic task.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Per-layer success table from telemetry JSON-lines files.
    TelemetryReport {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GradCheck { cfg, corrupt_gradient } => {
            let mut cfg = cfg.load()?;
            cfg.grad_check.corrupt_gradient |= corrupt_gradient;
            let outcome = commands::cmd_grad_check(&cfg);
            if let Ok(s) = &outcome {
                println!("max relative error {:.3e} over {} instances", s.max_rel_error, s.instances.len());
            }
            outcome.map(drop)
        }
        Command::AllocateTrace { cfg, input } => {
            let trace = commands::cmd_allocate_trace(&cfg.load()?, &input)?;
            println!("{}", serde_json::to_string_pretty(&trace)?);
            Ok(())
        }
        Command::Train { cfg } => {
            let run = commands::cmd_train(&cfg.load()?)?;
            for s in &run.stages {
                println!(
                    "stage {}: {} steps, eval loss {:.4} -> {:.4}",
                    s.stage, s.steps, s.initial_eval, s.final_eval
                );
            }
            Ok(())
        }
        Command::TelemetryReport { files, output } => {
            let csv = commands::cmd_telemetry_report(&files)?;
            match output {
                Some(path) => std::fs::write(&path, csv).map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evf-harness: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
