use serde::{Deserialize, Serialize};

use super::{config_err, ExperimentError};
use crate::data::{GaussianMixture, TargetDescriptor, Toy2D};
use crate::optim::OptimizerConfig;
use crate::p4inv::P4InvConfig;

/// How the linear map of a linear fit is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearMode {
    /// A plain matrix trained directly.
    Direct,
    /// A P⁴Inv layer; the model is its forward map.
    P4inv,
    /// A P⁴Inv layer; the model is its inverse map.
    P4invInverse,
}

impl LinearMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LinearMode::Direct => "direct",
            LinearMode::P4inv => "p4inv",
            LinearMode::P4invInverse => "p4inv-inverse",
        }
    }
}

impl std::str::FromStr for LinearMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(LinearMode::Direct),
            "p4inv" => Ok(LinearMode::P4inv),
            "p4inv-inverse" => Ok(LinearMode::P4invInverse),
            _ => Err(format!("unknown mode `{s}` (expected direct, p4inv or p4inv-inverse)")),
        }
    }
}

/// Fit of `x ↦ T x` from Gaussian inputs, loss `‖A x − y‖² / n` averaged
/// over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearFitConfig {
    pub target: TargetDescriptor,
    /// Seed of the target matrix, kept apart from `seed` so that runs with
    /// different training noise share the target.
    pub target_seed: u64,
    pub mode: LinearMode,
    /// Merge interval `N`.
    pub merge_interval: u64,
    pub layer: P4InvConfig,
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    pub batch: usize,
    pub seed: u64,
    /// Smoothed-loss level that counts as converged.
    pub threshold: f64,
    /// Width of the trailing loss average.
    pub smoothing_window: usize,
    /// End the run as soon as the smoothed loss is below `threshold`.
    pub stop_at_threshold: bool,
    /// Write a CSV row every this many steps.
    pub record_every: u64,
    /// Measure `‖A·A_inv − I‖∞` every this many steps (0 disables).
    pub residual_every: u64,
    /// Record the spectrum every this many steps when `n ≤ 32` (0 disables).
    pub eigen_every: u64,
    /// Measure the inverse residual after every accepted merge.
    pub track_merge_residual: bool,
    pub divergence_loss: f64,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            target: TargetDescriptor::PositiveDefinite { n: 32 },
            target_seed: 0,
            mode: LinearMode::P4inv,
            merge_interval: 1,
            layer: P4InvConfig {
                n_force: 10,
                n_correct: 50,
                penalty: 0.1,
                bias: false,
                ..P4InvConfig::default()
            },
            optimizer: OptimizerConfig::sgd(1e-2),
            steps: 20_000,
            batch: 128,
            seed: 0,
            threshold: 1e-4,
            smoothing_window: 100,
            stop_at_threshold: false,
            record_every: 1,
            residual_every: 100,
            eigen_every: 100,
            track_merge_residual: false,
            divergence_loss: 1e6,
        }
    }
}

impl LinearFitConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.target.dim() == 0 {
            return Err(config_err("target dimension must be positive"));
        }
        positive("steps", self.steps)?;
        positive("batch", self.batch as u64)?;
        positive("merge_interval", self.merge_interval)?;
        positive("smoothing_window", self.smoothing_window as u64)?;
        positive("record_every", self.record_every)?;
        check_optimizer(&self.optimizer)?;
        finite_positive("threshold", self.threshold)?;
        finite_positive("divergence_loss", self.divergence_loss)?;
        self.layer
            .validate()
            .map_err(|e| config_err(format!("layer: {e}")))
    }
}

/// Architecture of a 2D density model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityModel {
    /// Blocks of two P⁴Inv layers interleaved with Bent identities.
    P4invBent { blocks: usize },
    /// Affine coupling baseline.
    Rnvp { layers: usize, hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    pub dataset: Toy2D,
    pub model: DensityModel,
    pub layer: P4InvConfig,
    pub merge_interval: u64,
    pub optimizer: OptimizerConfig,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub epochs: u32,
    pub steps_per_epoch: u64,
    pub batch: usize,
    pub test_size: usize,
    /// Number of generated samples written at the end.
    pub samples: usize,
    pub seed: u64,
    pub record_every: u64,
    /// Largest inverse residual over the P⁴Inv layers, every this many steps
    /// (0 disables).
    pub residual_every: u64,
    /// Points per axis of the density grid on `[−8, 8]²` (0 skips it, 1 is
    /// rejected).
    pub grid_resolution: usize,
    pub divergence_loss: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            dataset: Toy2D::EightGaussians,
            model: DensityModel::P4invBent { blocks: 100 },
            layer: P4InvConfig {
                n_force: 10,
                n_correct: 50,
                penalty: 0.0,
                ..P4InvConfig::default()
            },
            merge_interval: 10,
            optimizer: OptimizerConfig::adam(5e-3),
            lr_decay: 0.5,
            epochs: 2,
            steps_per_epoch: 2000,
            batch: 200,
            test_size: 10_000,
            samples: 10_000,
            seed: 0,
            record_every: 10,
            residual_every: 100,
            grid_resolution: 400,
            divergence_loss: 1e6,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        match &self.model {
            DensityModel::P4invBent { blocks } => positive("model.blocks", *blocks as u64)?,
            DensityModel::Rnvp { layers, hidden } => {
                positive("model.layers", *layers as u64)?;
                if hidden.contains(&0) {
                    return Err(config_err("model.hidden widths must be positive"));
                }
            }
        }
        if self.grid_resolution == 1 {
            return Err(config_err("grid_resolution must be 0 or at least 2"));
        }
        positive("epochs", u64::from(self.epochs))?;
        positive("steps_per_epoch", self.steps_per_epoch)?;
        positive("batch", self.batch as u64)?;
        positive("test_size", self.test_size as u64)?;
        positive("merge_interval", self.merge_interval)?;
        positive("record_every", self.record_every)?;
        check_optimizer(&self.optimizer)?;
        finite_positive("lr_decay", self.lr_decay)?;
        finite_positive("divergence_loss", self.divergence_loss)?;
        self.layer
            .validate()
            .map_err(|e| config_err(format!("layer: {e}")))
    }

    pub fn total_steps(&self) -> u64 {
        u64::from(self.epochs) * self.steps_per_epoch
    }
}

/// Mixed likelihood and energy training of coupling blocks with P⁴Inv
/// swaps against a Gaussian-mixture target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyConfig {
    /// Target density; its negative log-density is the energy and its samples
    /// are the training data.
    pub mixture: GaussianMixture,
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub layer: P4InvConfig,
    pub merge_interval: u64,
    pub optimizer: OptimizerConfig,
    /// `w_e / w_l`.
    pub energy_ratio: f64,
    pub steps: u64,
    pub batch: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub record_every: u64,
    pub divergence_loss: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            mixture: GaussianMixture::four_modes(4, 2.0, 0.3),
            blocks: 2,
            hidden: vec![16, 16],
            layer: P4InvConfig::default(),
            merge_interval: 10,
            optimizer: OptimizerConfig::adam(1e-3),
            energy_ratio: 0.05,
            steps: 2000,
            batch: 256,
            eval_size: 4096,
            seed: 0,
            record_every: 10,
            divergence_loss: 1e6,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if GaussianMixture::new(
            self.mixture.means.clone(),
            self.mixture.weights.clone(),
            self.mixture.sigma,
        )
        .is_none()
        {
            return Err(config_err("mixture: invalid parameters"));
        }
        if self.mixture.dim() < 2 {
            return Err(config_err("mixture dimension must be at least 2"));
        }
        positive("blocks", self.blocks as u64)?;
        positive("steps", self.steps)?;
        positive("batch", self.batch as u64)?;
        positive("eval_size", self.eval_size as u64)?;
        positive("merge_interval", self.merge_interval)?;
        positive("record_every", self.record_every)?;
        check_optimizer(&self.optimizer)?;
        if !(self.energy_ratio >= 0.0 && self.energy_ratio.is_finite()) {
            return Err(config_err("energy_ratio must be finite and >= 0"));
        }
        finite_positive("divergence_loss", self.divergence_loss)?;
        self.layer
            .validate()
            .map_err(|e| config_err(format!("layer: {e}")))
    }
}

fn positive(name: &str, v: u64) -> Result<(), ExperimentError> {
    if v == 0 {
        return Err(config_err(format!("{name} must be positive")));
    }
    Ok(())
}

fn finite_positive(name: &str, v: f64) -> Result<(), ExperimentError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(config_err(format!("{name} must be finite and positive, got {v}")));
    }
    Ok(())
}

fn check_optimizer(o: &OptimizerConfig) -> Result<(), ExperimentError> {
    finite_positive("optimizer.lr", o.lr)?;
    if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
        return Err(config_err("optimizer betas must lie in [0, 1)"));
    }
    Ok(())
}
