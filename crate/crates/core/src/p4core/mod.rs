//! The generic perturbation training harness.
//!
//! A model exposes two kinds of trainable parameters through [`Trainable`]:
//! ordinary parameters, stepped directly by the optimizer, and perturbation
//! parameters owned by a [`Perturbation`]. The effective parameters seen by
//! the forward pass are `apply(frozen)`; every `merge_interval` steps the
//! perturbation is folded into the frozen parameters and reset to the
//! identity, which leaves the effective parameters unchanged.

mod record;
mod schedule;

use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::optim::{Optimizer, StepStatus};

pub use record::{RecordWriter, StepRecord, RECORD_SCHEMA};
pub use schedule::P4Schedule;

/// Whether a parameter block is a perturbation proxy or trained directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Perturbation,
    Direct,
}

/// Mutable view of one parameter block and its gradient accumulator.
///
/// `generation` changes whenever the owner re-initializes the block (a
/// perturbation reset); optimizers use it to discard stale moment estimates.
pub struct ParamView<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a mut [f64],
    pub role: ParamRole,
    pub generation: u64,
}

/// Anything with parameters an optimizer can step.
///
/// `visit_params` must visit blocks in the same order on every call.
pub trait Trainable {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.grads.iter_mut().for_each(|g| *g = 0.0));
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.values.len());
        n
    }

    fn params_finite(&mut self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| ok &= p.values.iter().all(|x| x.is_finite()));
        ok
    }
}

/// Result of one merge attempt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MergeTag {
    Merged,
    ForcedMerge,
    SkippedIllConditioned,
    SkippedNonFinite,
}

impl MergeTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MergeTag::Merged => "merged",
            MergeTag::ForcedMerge => "forced",
            MergeTag::SkippedIllConditioned => "skipped_ill_conditioned",
            MergeTag::SkippedNonFinite => "skipped_non_finite",
        }
    }

    /// True when the frozen parameters were updated.
    pub fn accepted(&self) -> bool {
        matches!(self, MergeTag::Merged | MergeTag::ForcedMerge)
    }
}

impl fmt::Display for MergeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub tag: MergeTag,
    /// `ln|G|` of the candidate update, when it could be computed.
    pub log_abs_factor: Option<f64>,
    /// `ln|G · det A|` of the candidate update.
    pub log_abs_new_det: Option<f64>,
}

impl MergeOutcome {
    pub fn tagged(tag: MergeTag) -> Self {
        Self {
            tag,
            log_abs_factor: None,
            log_abs_new_det: None,
        }
    }
}

/// A property-preserving perturbation of some frozen parameters.
///
/// Contract:
/// * after [`reset`](Perturbation::reset), [`effective`](Perturbation::effective)
///   equals the frozen parameters;
/// * a successful [`attempt_merge`](Perturbation::attempt_merge) leaves
///   `effective()` unchanged up to roundoff.
pub trait Perturbation {
    /// Reset the perturbation to the identity without merging.
    fn reset(&mut self, rng: &mut dyn RngCore);

    /// Fold the perturbation into the frozen parameters if it is safe to.
    fn attempt_merge(&mut self, rng: &mut dyn RngCore) -> MergeOutcome;

    /// The frozen parameters, flattened.
    fn frozen(&self) -> Vec<f64>;

    /// `apply(frozen)`: the parameters the forward pass sees, flattened.
    fn effective(&self) -> Vec<f64>;

    /// Sign and log-magnitude of the effective determinant, for layers that
    /// track one.
    fn det_record(&self) -> Option<(i8, f64)> {
        None
    }
}

/// A model trained with perturbation updates.
pub trait P4Model: Trainable {
    fn visit_perturbations(&mut self, f: &mut dyn FnMut(&mut dyn Perturbation));
}

/// Relative infinity-norm distance between two effective parameter sets.
///
/// Used around merges: `before` is `effective()` sampled just before the
/// merge, `after` just after it.
pub fn merge_noop_check(before: &[f64], after: &[f64]) -> f64 {
    assert_eq!(before.len(), after.len());
    let scale = before.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let diff = before
        .iter()
        .zip(after)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Counters kept across a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub steps: u64,
    pub aborted_non_finite_loss: u64,
    pub skipped_non_finite_grads: u64,
    pub merges: u64,
    pub forced_merges: u64,
    pub skipped_ill_conditioned: u64,
    pub skipped_non_finite: u64,
}

impl TrainDiagnostics {
    fn count(&mut self, tag: MergeTag) {
        match tag {
            MergeTag::Merged => self.merges += 1,
            MergeTag::ForcedMerge => self.forced_merges += 1,
            MergeTag::SkippedIllConditioned => self.skipped_ill_conditioned += 1,
            MergeTag::SkippedNonFinite => self.skipped_non_finite += 1,
        }
    }
}

/// What happened during a single call to [`p4_train_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub aborted: bool,
    pub optimizer: Option<StepStatus>,
    /// One entry per perturbation, in visit order, if a merge was attempted.
    pub merges: Vec<MergeOutcome>,
}

/// One iteration of perturbation training.
///
/// `loss_and_grad` evaluates the perturbed model on the current batch and
/// accumulates gradients into the model's parameter views (they are zeroed
/// first). A non-finite loss aborts the step: no optimizer update, and every
/// perturbation is reset without merging.
pub fn p4_train_step<M, F>(
    model: &mut M,
    loss_and_grad: F,
    optimizer: &mut Optimizer,
    schedule: &mut P4Schedule,
    diagnostics: &mut TrainDiagnostics,
    rng: &mut dyn RngCore,
) -> StepReport
where
    M: P4Model + ?Sized,
    F: FnOnce(&mut M) -> f64,
{
    model.zero_grads();
    let loss = loss_and_grad(model);
    let fire = schedule.advance();
    diagnostics.steps += 1;

    if !loss.is_finite() {
        diagnostics.aborted_non_finite_loss += 1;
        model.visit_perturbations(&mut |p| p.reset(rng));
        return StepReport {
            step: schedule.step(),
            loss,
            aborted: true,
            optimizer: None,
            merges: Vec::new(),
        };
    }

    let status = optimizer.step(model);
    if status != StepStatus::Applied {
        diagnostics.skipped_non_finite_grads += 1;
    }

    let mut merges = Vec::new();
    if fire {
        model.visit_perturbations(&mut |p| {
            let outcome = p.attempt_merge(rng);
            diagnostics.count(outcome.tag);
            merges.push(outcome);
        });
    }
    StepReport {
        step: schedule.step(),
        loss,
        aborted: false,
        optimizer: Some(status),
        merges,
    }
}
