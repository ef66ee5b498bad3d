use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DetReport, ExperimentError, LinearFitConfig, LinearMode, RunOutcome, SmoothedLoss};
use crate::data::{LinearTarget, TargetDescriptor};
use crate::linalg::oracle::{eigenvalues, lu_det};
use crate::linalg::rank_one::sherman_morrison_update;
use crate::linalg::DenseMatrix;
use crate::optim::Optimizer;
use crate::p4core::{
    p4_train_step, P4Model, P4Schedule, ParamRole, ParamView, Perturbation, RecordWriter,
    StepRecord, Trainable, TrainDiagnostics,
};
use crate::p4inv::{LayerInit, P4InvLayer};

/// An unconstrained square matrix trained directly.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinear {
    a: DenseMatrix,
    grad: DenseMatrix,
}

impl DenseLinear {
    pub fn identity(n: usize) -> Self {
        Self {
            a: DenseMatrix::identity(n),
            grad: DenseMatrix::zeros(n, n),
        }
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn forward_batch(&self, x: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(x.rows(), self.a.rows());
        for r in 0..x.rows() {
            self.a.gemv_into(x.row(r), out.row_mut(r));
        }
        out
    }

    /// Accumulates `Σ_r g_r x_rᵀ`.
    pub fn backward_batch(&mut self, x: &DenseMatrix, grad_y: &DenseMatrix) {
        for r in 0..x.rows() {
            self.grad.add_outer(1.0, grad_y.row(r), x.row(r));
        }
    }
}

impl Trainable for DenseLinear {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        f(ParamView {
            values: self.a.as_mut_slice(),
            grads: self.grad.as_mut_slice(),
            role: ParamRole::Direct,
            generation: 0,
        });
    }
}

impl P4Model for DenseLinear {
    fn visit_perturbations(&mut self, _f: &mut dyn FnMut(&mut dyn Perturbation)) {}
}

enum Model {
    Direct(DenseLinear),
    Layer { layer: P4InvLayer, inverse: bool },
}

impl Model {
    fn predict(&self, x: &DenseMatrix) -> Option<DenseMatrix> {
        match self {
            Model::Direct(d) => Some(d.forward_batch(x)),
            Model::Layer { layer, inverse: false } => Some(layer.forward_batch(x)),
            Model::Layer { layer, inverse: true } => layer.inverse_batch(x).ok(),
        }
    }

    /// Mean of `‖f(x) − y‖² / n` plus the layer penalty, with gradients.
    fn loss_and_grad(&mut self, x: &DenseMatrix, y: &DenseMatrix) -> f64 {
        let Some(pred) = self.predict(x) else {
            return f64::NAN;
        };
        let scale = 1.0 / (x.rows() * x.cols()) as f64;
        let mut grad = pred;
        let mut loss = 0.0;
        for (g, t) in grad.as_mut_slice().iter_mut().zip(y.as_slice()) {
            let d = *g - t;
            loss += d * d;
            *g = 2.0 * scale * d;
        }
        loss *= scale;
        match self {
            Model::Direct(d) => d.backward_batch(x, &grad),
            Model::Layer { layer, inverse } => {
                if *inverse {
                    if layer.backward_inverse_batch(x, &grad, 0.0).is_err() {
                        return f64::NAN;
                    }
                } else {
                    layer.backward_batch(x, &grad, 0.0);
                }
                loss += layer.penalty_backward(1.0);
            }
        }
        loss
    }

    /// The matrix the model currently applies.
    fn model_matrix(&self) -> Option<DenseMatrix> {
        match self {
            Model::Direct(d) => Some(d.matrix().clone()),
            Model::Layer { layer, inverse: false } => Some(layer.effective_matrix()),
            Model::Layer { layer, inverse: true } => {
                sherman_morrison_update(layer.frozen_inverse(), layer.u(), layer.v()).ok()
            }
        }
    }

    fn model_det(&self) -> Option<DetReport> {
        let d = match self {
            Model::Direct(d) => lu_det(d.matrix()).ok()?,
            Model::Layer { layer, inverse: false } => layer.effective_det(),
            Model::Layer { layer, inverse: true } => layer.effective_det().recip(),
        };
        Some(DetReport {
            sign: d.sign,
            log_abs: d.log_abs,
        })
    }

    fn layer(&self) -> Option<&P4InvLayer> {
        match self {
            Model::Direct(_) => None,
            Model::Layer { layer, .. } => Some(layer),
        }
    }
}

impl Trainable for Model {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        match self {
            Model::Direct(d) => d.visit_params(f),
            Model::Layer { layer, .. } => layer.visit_params(f),
        }
    }
}

impl P4Model for Model {
    fn visit_perturbations(&mut self, f: &mut dyn FnMut(&mut dyn Perturbation)) {
        if let Model::Layer { layer, .. } = self {
            f(layer);
        }
    }
}

/// Spectrum of the model matrix at one step, as `(re, im)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSnapshot {
    pub step: u64,
    pub eigenvalues: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFitReport {
    pub mode: LinearMode,
    pub target: TargetDescriptor,
    pub merge_interval: u64,
    pub steps_run: u64,
    /// First step whose trailing-mean loss is below the threshold.
    pub steps_to_threshold: Option<u64>,
    pub threshold: f64,
    pub final_loss: f64,
    pub final_smoothed_loss: f64,
    /// Largest entry of `M − T` for the final model matrix `M`.
    pub final_target_error: Option<f64>,
    /// `‖A·A_inv − I‖` of the stored pair (P⁴Inv modes).
    pub final_inverse_residual: Option<f64>,
    /// Largest inverse residual seen right after an accepted merge, when
    /// tracked.
    pub max_merge_inverse_residual: Option<f64>,
    /// Determinant of the map the model applies.
    pub final_det: Option<DetReport>,
    /// Determinant stored in the P⁴Inv layer.
    pub stored_det: Option<DetReport>,
    pub eigen_trace: Vec<EigenSnapshot>,
    pub diagnostics: TrainDiagnostics,
    pub outcome: RunOutcome,
    pub seconds: f64,
}

/// Trains one linear model against the configured target.
pub fn run_linear_fit<W: Write>(
    config: &LinearFitConfig,
    mut records: Option<&mut RecordWriter<W>>,
) -> Result<LinearFitReport, ExperimentError> {
    config.validate()?;
    let started = Instant::now();
    let target = LinearTarget::generate(config.target, config.target_seed);
    let n = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut model = match config.mode {
        LinearMode::Direct => Model::Direct(DenseLinear::identity(n)),
        LinearMode::P4inv | LinearMode::P4invInverse => Model::Layer {
            layer: P4InvLayer::new(n, LayerInit::Identity, config.layer.clone(), &mut rng)?,
            inverse: config.mode == LinearMode::P4invInverse,
        },
    };
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let mut schedule = P4Schedule::new(config.merge_interval);
    let mut diagnostics = TrainDiagnostics::default();
    let mut smooth = SmoothedLoss::new(config.smoothing_window);

    let want_eigen = config.eigen_every > 0 && n <= 32;
    let mut eigen_trace = Vec::new();
    let mut steps_to_threshold = None;
    let mut max_merge_residual: Option<f64> = None;
    let mut outcome = RunOutcome::Completed;
    let mut last_loss = f64::NAN;
    let mut steps_run = 0;

    for step in 0..config.steps {
        if want_eigen && step % config.eigen_every == 0 {
            push_eigen(&model, step, &mut eigen_trace);
        }
        let (x, y) = target.sample_batch(config.batch, &mut rng);
        let report = p4_train_step(
            &mut model,
            |m| m.loss_and_grad(&x, &y),
            &mut optimizer,
            &mut schedule,
            &mut diagnostics,
            &mut rng,
        );
        steps_run = step + 1;
        last_loss = report.loss;
        let smoothed = smooth.push(report.loss);
        if steps_to_threshold.is_none() && smoothed < config.threshold {
            steps_to_threshold = Some(step);
        }

        let merged = report.merges.iter().any(|m| m.tag.accepted());
        if config.track_merge_residual && merged {
            if let Some(layer) = model.layer() {
                let r = layer.inverse_residual();
                max_merge_residual = Some(max_merge_residual.map_or(r, |m| m.max(r)));
            }
        }

        if let Some(w) = records.as_deref_mut() {
            if step % config.record_every == 0 {
                let residual = match model.layer() {
                    Some(layer) if config.residual_every > 0 && step % config.residual_every == 0 => {
                        Some(layer.inverse_residual())
                    }
                    _ => None,
                };
                let dets = model
                    .layer()
                    .map(|l| {
                        let d = l.effective_det();
                        vec![(d.sign, d.log_abs)]
                    })
                    .unwrap_or_default();
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

        if report.loss.is_finite() && report.loss > config.divergence_loss {
            outcome = RunOutcome::Diverged {
                step,
                loss: report.loss,
            };
            break;
        }
        if config.stop_at_threshold && steps_to_threshold.is_some() {
            outcome = RunOutcome::Converged;
            break;
        }
    }
    if let Some(w) = records {
        w.flush()?;
    }
    if want_eigen {
        push_eigen(&model, steps_run, &mut eigen_trace);
    }

    let final_target_error = model
        .model_matrix()
        .map(|m| m.max_abs_diff(&target.matrix));
    Ok(LinearFitReport {
        mode: config.mode,
        target: config.target,
        merge_interval: config.merge_interval,
        steps_run,
        steps_to_threshold,
        threshold: config.threshold,
        final_loss: last_loss,
        final_smoothed_loss: smooth.mean(),
        final_target_error,
        final_inverse_residual: model.layer().map(P4InvLayer::inverse_residual),
        max_merge_inverse_residual: max_merge_residual,
        final_det: model.model_det(),
        stored_det: model.layer().map(|l| DetReport {
            sign: l.frozen_det().sign,
            log_abs: l.frozen_det().log_abs,
        }),
        eigen_trace,
        diagnostics,
        outcome,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn push_eigen(model: &Model, step: u64, trace: &mut Vec<EigenSnapshot>) {
    if let Some(ev) = model.model_matrix().and_then(|m| eigenvalues(&m).ok()) {
        trace.push(EigenSnapshot {
            step,
            eigenvalues: ev,
        });
    }
}
