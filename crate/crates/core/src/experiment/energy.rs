use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EnergyConfig, ExperimentError, RunOutcome};
use crate::flows::{build_p4swap_block, FlowError, FlowStack, LossWeights};
use crate::linalg::DenseMatrix;
use crate::optim::Optimizer;
use crate::p4core::{p4_train_step, P4Schedule, RecordWriter, StepRecord, Trainable, TrainDiagnostics};

const EVAL_SEED_OFFSET: u64 = 0xD1B5_4A32_D192_ED03;

/// Losses of a model on the fixed evaluation batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyEval {
    pub likelihood: f64,
    pub energy: f64,
    pub penalty: f64,
    /// `w_l·J_l + w_e·J_e + penalty`.
    pub mixed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dim: usize,
    pub num_params: usize,
    pub weights: LossWeights,
    pub steps_run: u64,
    pub initial: EnergyEval,
    pub last: EnergyEval,
    /// `1 − last.mixed / initial.mixed`.
    pub reduction: f64,
    pub max_inverse_residual: Option<f64>,
    pub diagnostics: TrainDiagnostics,
    pub outcome: RunOutcome,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct EnergyRun {
    pub report: EnergyReport,
    pub model: FlowStack,
}

struct EvalSet {
    x: DenseMatrix,
    z: DenseMatrix,
}

fn evaluate(model: &FlowStack, eval: &EvalSet, config: &EnergyConfig, w: LossWeights) -> Result<EnergyEval, FlowError> {
    let likelihood = model.mean_nll(&eval.x)?;
    let energy = model.mean_energy_loss(&eval.z, &config.mixture)?;
    let penalty = model.total_penalty();
    Ok(EnergyEval {
        likelihood,
        energy,
        penalty,
        mixed: w.likelihood * likelihood + w.energy * energy + penalty,
    })
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Trains stacked coupling blocks with P⁴Inv swaps on a mixture of the
/// likelihood of mixture samples and the energy of generated samples.
pub fn run_energy_fit<W: Write>(
    config: &EnergyConfig,
    mut records: Option<&mut RecordWriter<W>>,
) -> Result<EnergyRun, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let dim = config.mixture.dim();
    let weights = LossWeights::from_ratio(config.energy_ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut model = FlowStack::new(dim);
    for _ in 0..config.blocks {
        model.append(build_p4swap_block(dim, &config.hidden, &config.layer, &mut rng)?)?;
    }
    let num_params = model.num_params();

    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(EVAL_SEED_OFFSET));
    let eval = EvalSet {
        x: config.mixture.sample(config.eval_size, &mut eval_rng),
        z: gaussian(config.eval_size, dim, &mut eval_rng),
    };
    let initial = evaluate(&model, &eval, config, weights)?;

    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut schedule = P4Schedule::new(config.merge_interval);
    let mut diagnostics = TrainDiagnostics::default();
    let mut outcome = RunOutcome::Completed;
    let mut steps_run = 0;

    for step in 0..config.steps {
        let x = config.mixture.sample(config.batch, &mut rng);
        let z = gaussian(config.batch, dim, &mut rng);
        let report = p4_train_step(
            &mut model,
            |m| {
                m.mixed_loss(weights, &x, &z, &config.mixture)
                    .unwrap_or(f64::NAN)
            },
            &mut optimizer,
            &mut schedule,
            &mut diagnostics,
            &mut rng,
        );
        steps_run = step + 1;
        if let Some(w) = records.as_deref_mut() {
            if step % config.record_every == 0 {
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
                    inverse_residual: None,
                    dets,
                })?;
            }
        }
        if report.loss.is_finite() && report.loss > config.divergence_loss {
            outcome = RunOutcome::Diverged {
                step,
                loss: report.loss,
            };
            break;
        }
    }
    if let Some(w) = records {
        w.flush()?;
    }

    let last = evaluate(&model, &eval, config, weights)?;
    let report = EnergyReport {
        dim,
        num_params,
        weights,
        steps_run,
        initial,
        last,
        reduction: 1.0 - last.mixed / initial.mixed,
        max_inverse_residual: model
            .p4inv_layers()
            .map(|l| l.inverse_residual())
            .reduce(f64::max),
        diagnostics,
        outcome,
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok(EnergyRun { report, model })
}
