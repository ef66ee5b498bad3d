use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::verify::roundtrip_errors;
use super::{DensityConfig, DensityModel, ExperimentError, RunOutcome};
use crate::data::{assign_to_modes, Toy2D};
use crate::flows::{p4inv_bent_2d, rnvp_2d, FlowError, FlowStack};
use crate::linalg::DenseMatrix;
use crate::optim::Optimizer;
use crate::p4core::{p4_train_step, P4Schedule, RecordWriter, StepRecord, Trainable, TrainDiagnostics};

/// Offsets from the run seed to the test-set and probe seeds.
const TEST_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;
const PROBE_SEED_OFFSET: u64 = 0x6A09_E667_F3BC_C909;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub dataset: Toy2D,
    pub model: DensityModel,
    pub num_params: usize,
    pub steps_run: u64,
    /// Test NLL (nats per sample) before training.
    pub initial_test_nll: f64,
    /// Test NLL after each completed epoch.
    pub epoch_test_nll: Vec<f64>,
    pub final_test_nll: f64,
    /// Mean model log-density of the generated samples.
    pub sample_mean_log_density: f64,
    /// Generated samples per mode, by nearest mode center (eight-Gaussian data
    /// only).
    pub mode_counts: Option<Vec<usize>>,
    /// Modes holding at least 2% of the generated samples.
    pub modes_covered: Option<usize>,
    /// Model density integrated over the grid on `[−8, 8]²`.
    pub grid_mass: Option<f64>,
    /// Worst `|F⁻¹(F(z)) − z|` on 256 probes, at initialization and after
    /// every epoch.
    pub max_roundtrip_error: f64,
    /// Worst `|ln|J_F| + ln|J_F⁻¹||` on the same probes.
    pub max_logdet_antisymmetry: f64,
    /// Largest `‖A·A_inv − I‖` over the P⁴Inv layers at the end of training.
    pub max_inverse_residual: Option<f64>,
    pub diagnostics: TrainDiagnostics,
    pub outcome: RunOutcome,
    pub seconds: f64,
}

/// A finished density run: the report, the trained model and the generated
/// samples with their model log-densities.
#[derive(Debug, Clone)]
pub struct DensityRun {
    pub report: DensityReport,
    pub model: FlowStack,
    pub samples: DenseMatrix,
    pub sample_log_density: Vec<f64>,
}

pub(crate) fn build_density_model(
    config: &DensityConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FlowStack, FlowError> {
    match &config.model {
        DensityModel::P4invBent { blocks } => p4inv_bent_2d(*blocks, &config.layer, rng),
        DensityModel::Rnvp { layers, hidden } => Ok(rnvp_2d(*layers, hidden, rng)),
    }
}

fn max_inverse_residual(model: &FlowStack) -> Option<f64> {
    model
        .p4inv_layers()
        .map(|l| l.inverse_residual())
        .reduce(f64::max)
}

/// Trains a 2D density model by maximum likelihood.
pub fn run_density_2d<W: Write>(
    config: &DensityConfig,
    mut records: Option<&mut RecordWriter<W>>,
) -> Result<DensityRun, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let test = config
        .dataset
        .sample_seeded(config.test_size, config.seed.wrapping_add(TEST_SEED_OFFSET));

    let mut model = build_density_model(config, &mut rng)?;
    let num_params = model.num_params();
    let initial_test_nll = model.mean_nll(&test)?;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(PROBE_SEED_OFFSET));
    let (mut max_roundtrip_error, mut max_logdet_antisymmetry) =
        roundtrip_errors(&model, 256, 1.0, &mut probe_rng)?;

    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut schedule = P4Schedule::new(config.merge_interval);
    let mut diagnostics = TrainDiagnostics::default();
    let mut epoch_test_nll = Vec::new();
    let mut outcome = RunOutcome::Completed;
    let mut step = 0;

    'epochs: for epoch in 0..config.epochs {
        optimizer.set_lr(config.optimizer.lr * config.lr_decay.powi(epoch as i32));
        for _ in 0..config.steps_per_epoch {
            let x = config.dataset.sample(config.batch, &mut rng);
            let report = p4_train_step(
                &mut model,
                |m| m.nll_loss(&x).unwrap_or(f64::NAN),
                &mut optimizer,
                &mut schedule,
                &mut diagnostics,
                &mut rng,
            );
            if let Some(w) = records.as_deref_mut() {
                if step % config.record_every == 0 {
                    let residual = if config.residual_every > 0 && step % config.residual_every == 0 {
                        max_inverse_residual(&model)
                    } else {
                        None
                    };
                    let dets = model
                        .p4inv_layers()
                        .map(|l| {
                            let d = l.effective_det();
                            (d.sign, d.log_abs)
                        })
                        .collect();
                    w.write(&StepRecord {
                        step,
                        loss: report.loss,
                        lr: optimizer.lr(),
                        merge: StepRecord::summarize_merges(&report.merges),
                        inverse_residual: residual,
                        dets,
                    })?;
                }
            }
            step += 1;
            if report.loss.is_finite() && report.loss > config.divergence_loss {
                outcome = RunOutcome::Diverged {
                    step: step - 1,
                    loss: report.loss,
                };
                break 'epochs;
            }
        }
        epoch_test_nll.push(model.mean_nll(&test)?);
        let (rt, anti) = roundtrip_errors(&model, 256, 1.0, &mut probe_rng)?;
        max_roundtrip_error = max_roundtrip_error.max(rt);
        max_logdet_antisymmetry = max_logdet_antisymmetry.max(anti);
    }
    if let Some(w) = records {
        w.flush()?;
    }

    let (samples, sample_log_density) = model.sample_with_log_density(config.samples, &mut rng)?;
    let sample_mean_log_density = mean(&sample_log_density);
    let mode_counts = (config.dataset == Toy2D::EightGaussians)
        .then(|| assign_to_modes(&samples, &Toy2D::eight_gaussian_centers()));
    let modes_covered = mode_counts.as_ref().map(|c| {
        c.iter()
            .filter(|&&k| k as f64 >= 0.02 * config.samples as f64)
            .count()
    });
    let grid_mass = if config.grid_resolution > 0 {
        Some(grid_mass(&model, 8.0, config.grid_resolution)?)
    } else {
        None
    };
    let final_test_nll = epoch_test_nll.last().copied().unwrap_or(initial_test_nll);

    let report = DensityReport {
        dataset: config.dataset,
        model: config.model.clone(),
        num_params,
        steps_run: step,
        initial_test_nll,
        epoch_test_nll,
        final_test_nll,
        sample_mean_log_density,
        mode_counts,
        modes_covered,
        grid_mass,
        max_roundtrip_error,
        max_logdet_antisymmetry,
        max_inverse_residual: max_inverse_residual(&model),
        diagnostics,
        outcome,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(DensityRun {
        report,
        model,
        samples,
        sample_log_density,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trapezoid-rule integral of the model density over
/// `[−half_width, half_width]²` with `resolution` points per axis.
pub fn grid_mass(model: &FlowStack, half_width: f64, resolution: usize) -> Result<f64, FlowError> {
    assert!(resolution >= 2, "need at least two grid points per axis");
    let h = 2.0 * half_width / (resolution - 1) as f64;
    let weight = |i: usize| if i == 0 || i == resolution - 1 { 0.5 } else { 1.0 };
    let mut total = 0.0;
    for i in 0..resolution {
        let y = -half_width + i as f64 * h;
        let pts = DenseMatrix::from_fn(resolution, 2, |j, c| {
            if c == 0 {
                -half_width + j as f64 * h
            } else {
                y
            }
        });
        let row: f64 = model
            .log_density(&pts)?
            .iter()
            .enumerate()
            .map(|(j, l)| weight(j) * l.exp())
            .sum();
        total += weight(i) * row;
    }
    Ok(total * h * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub count: usize,
    pub seed: u64,
    pub mean_log_density: f64,
}

/// Draws `count` samples from a stored model. Deterministic in `seed`.
pub fn flow_sample(
    checkpoint_json: &str,
    count: usize,
    seed: u64,
) -> Result<(DenseMatrix, Vec<f64>, SampleReport), ExperimentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FlowStack::from_json(checkpoint_json, &mut rng)?;
    let (x, lp) = model.sample_with_log_density(count, &mut rng)?;
    let report = SampleReport {
        count,
        seed,
        mean_log_density: mean(&lp),
    };
    Ok((x, lp, report))
}

/// Writes `x,y,log_density` rows.
pub fn write_samples<W: Write>(
    sink: W,
    samples: &DenseMatrix,
    log_density: &[f64],
) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header: Vec<String> = (0..samples.cols()).map(|i| format!("x{i}")).collect();
    header.push("log_density".into());
    w.write_record(&header)?;
    for r in 0..samples.rows() {
        let mut row: Vec<String> = samples.row(r).iter().map(|v| format!("{v:e}")).collect();
        row.push(format!("{:e}", log_density[r]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
