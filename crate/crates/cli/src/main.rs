//! `p4flow`: runs the linear-fit, density and energy experiments and the
//! invariant suite.
//!
//! Exit codes: 0 success, 1 runtime failure or failed verification, 2 bad
//! configuration or checkpoint, 3 divergence.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use p4flow::experiment::{
    flow_sample, load_config_or_default, run_density_2d, run_energy_fit, run_linear_fit, run_verify,
    write_json, write_samples, DensityConfig, EnergyConfig, ExperimentError, LinearFitConfig,
    LinearMode, RunOutcome,
};
use p4flow::p4core::RecordWriter;

#[derive(Parser)]
#[command(name = "p4flow", version, about = "P4Inv training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a linear map to a target matrix (records.csv, report.json).
    LinearFit {
        #[command(flatten)]
        common: Common,
        /// Override the number of training steps.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        mode: Option<LinearMode>,
    },
    /// Train a 2D density model (records.csv, report.json, samples.csv,
    /// checkpoint.json).
    #[command(name = "density-2d")]
    Density2d {
        #[command(flatten)]
        common: Common,
        /// Override the number of steps per epoch.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train coupling blocks with P4Inv swaps on a mixed likelihood and
    /// energy loss (records.csv, report.json, checkpoint.json).
    EnergyFit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Draw samples from a stored model (samples.csv, report.json).
    FlowSample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "p4flow-out")]
        out: PathBuf,
    },
    /// Run the invariant suite (report.json).
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "p4flow-out")]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Diverged(String),
    Verify,
    Other(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn records(out: &Path) -> Result<RecordWriter<BufWriter<File>>, Failure> {
    Ok(RecordWriter::new(BufWriter::new(File::create(out.join("records.csv"))?))?)
}

fn check_outcome(outcome: &RunOutcome) -> Result<(), Failure> {
    match outcome {
        RunOutcome::Diverged { step, loss } => Err(Failure::Diverged(format!(
            "diverged at step {step} (loss {loss:e})"
        ))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::LinearFit { common, steps, mode } => {
            let mut cfg: LinearFitConfig = load_config_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.validate()?;
            fs::create_dir_all(&common.out)?;
            let mut w = records(&common.out)?;
            let report = run_linear_fit(&cfg, Some(&mut w))?;
            write_json(&common.out.join("report.json"), &report)?;
            println!(
                "{} on {:?}: {} steps, smoothed loss {:.3e}, threshold reached at {:?}",
                report.mode.as_str(),
                report.target,
                report.steps_run,
                report.final_smoothed_loss,
                report.steps_to_threshold
            );
            check_outcome(&report.outcome)
        }
        Command::Density2d { common, steps } => {
            let mut cfg: DensityConfig = load_config_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps_per_epoch = s;
            }
            cfg.validate()?;
            fs::create_dir_all(&common.out)?;
            let mut w = records(&common.out)?;
            let run = run_density_2d(&cfg, Some(&mut w))?;
            write_json(&common.out.join("report.json"), &run.report)?;
            write_samples(
                BufWriter::new(File::create(common.out.join("samples.csv"))?),
                &run.samples,
                &run.sample_log_density,
            )?;
            fs::write(
                common.out.join("checkpoint.json"),
                run.model.to_json().map_err(ExperimentError::from)?,
            )?;
            println!(
                "test NLL {:.4} -> {:.4} over {} steps",
                run.report.initial_test_nll, run.report.final_test_nll, run.report.steps_run
            );
            check_outcome(&run.report.outcome)
        }
        Command::EnergyFit { common, steps } => {
            let mut cfg: EnergyConfig = load_config_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            fs::create_dir_all(&common.out)?;
            let mut w = records(&common.out)?;
            let run = run_energy_fit(&cfg, Some(&mut w))?;
            write_json(&common.out.join("report.json"), &run.report)?;
            fs::write(
                common.out.join("checkpoint.json"),
                run.model.to_json().map_err(ExperimentError::from)?,
            )?;
            println!(
                "mixed loss {:.4} -> {:.4} ({:.1}% lower)",
                run.report.initial.mixed,
                run.report.last.mixed,
                100.0 * run.report.reduction
            );
            check_outcome(&run.report.outcome)
        }
        Command::FlowSample {
            checkpoint,
            count,
            seed,
            out,
        } => {
            let json = fs::read_to_string(&checkpoint)
                .map_err(|e| Failure::Config(format!("{}: {e}", checkpoint.display())))?;
            let (x, lp, report) = flow_sample(&json, count, seed).map_err(|e| match e {
                ExperimentError::Flow(_) | ExperimentError::Json(_) => {
                    Failure::Config(format!("{}: {e}", checkpoint.display()))
                }
                other => other.into(),
            })?;
            fs::create_dir_all(&out)?;
            write_samples(BufWriter::new(File::create(out.join("samples.csv"))?), &x, &lp)?;
            write_json(&out.join("report.json"), &report)?;
            println!("{count} samples, mean log-density {:.4}", report.mean_log_density);
            Ok(())
        }
        Command::Verify { seed, out } => {
            let report = run_verify(seed).map_err(|e| Failure::Other(e.to_string()))?;
            for c in &report.checks {
                println!(
                    "{} {:<48} {:.3e} (tolerance {:.0e})",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                write_json(&out.join("report.json"), &report)?;
            }
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Verify)
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Verify) => {
            eprintln!("verification failed");
            ExitCode::from(1)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
