//! Experiment drivers behind the `p4flow` command line tool.
//!
//! Each driver takes a validated configuration, streams per-step
//! [`StepRecord`](crate::p4core::StepRecord)s to an optional CSV sink and
//! returns a serializable report. Divergence is not an error: the run stops
//! and the report says so in its `outcome`.

mod config;
mod density;
mod energy;
mod linear;
mod verify;

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{DensityConfig, DensityModel, EnergyConfig, LinearFitConfig, LinearMode};
pub use density::{
    flow_sample, grid_mass, run_density_2d, write_samples, DensityReport, DensityRun, SampleReport,
};
pub use energy::{run_energy_fit, EnergyEval, EnergyReport, EnergyRun};
pub use linear::{run_linear_fit, DenseLinear, EigenSnapshot, LinearFitReport};
pub use verify::{
    bijection_gradient_error, jitter_params, merge_noop_error, mlp_gradient_error,
    rank_one_oracle_errors, roundtrip_errors, run_verify, CheckResult, RankOneErrors,
    VerifyReport, FD_STEP, GRADIENT_FLOOR,
};

use crate::flows::FlowError;
use crate::p4inv::P4InvError;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Layer(#[from] P4InvError),
}

/// How a training run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    /// Stopped early because the smoothed loss fell below the threshold.
    Converged,
    /// Stopped because the loss exceeded the divergence limit.
    Diverged { step: u64, loss: f64 },
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self, RunOutcome::Diverged { .. })
    }
}

/// `(sign, ln|det|)` in report form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetReport {
    pub sign: i8,
    pub log_abs: f64,
}

/// Trailing mean over the last `window` finite values.
#[derive(Debug, Clone)]
pub struct SmoothedLoss {
    window: usize,
    values: VecDeque<f64>,
}

impl SmoothedLoss {
    pub fn new(window: usize) -> Self {
        assert!(window > 0);
        Self {
            window,
            values: VecDeque::with_capacity(window),
        }
    }

    /// Pushes a value and returns the current mean. Non-finite values are
    /// ignored.
    pub fn push(&mut self, x: f64) -> f64 {
        if x.is_finite() {
            if self.values.len() == self.window {
                self.values.pop_front();
            }
            self.values.push_back(x);
        }
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            f64::NAN
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

/// Reads a JSON configuration, rejecting unknown keys.
pub fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ExperimentError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// [`load_config`] when a path is given, the defaults otherwise.
pub fn load_config_or_default<T>(path: Option<&Path>) -> Result<T, ExperimentError>
where
    T: serde::de::DeserializeOwned + Default,
{
    path.map_or_else(|| Ok(T::default()), load_config)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
