//! SGD and Adam over [`Trainable`] parameter views.

use serde::{Deserialize, Serialize};

use crate::p4core::{ParamRole, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Zero the Adam moments of a perturbation block whenever its owner resets
    /// it (u zeroed, v redrawn).
    pub reset_moments_on_merge: bool,
    /// Optional global gradient-norm clip. Off by default.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            reset_moments_on_merge: true,
            clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Applied,
    /// At least one gradient was NaN or infinite; nothing was written.
    SkippedNonFinite,
}

/// `p ← p − lr·g`. Refuses (and writes nothing) if any gradient is non-finite.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> StepStatus {
    assert_eq!(params.len(), grads.len());
    if !grads.iter().all(|g| g.is_finite()) {
        return StepStatus::SkippedNonFinite;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        let next = *p - lr * g;
        if next.is_finite() {
            *p = next;
        }
    }
    StepStatus::Applied
}

/// First and second moment estimates for one parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(
    state: &mut AdamMoments,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> StepStatus {
    assert_eq!(params.len(), grads.len());
    assert_eq!(state.m.len(), params.len());
    if !grads.iter().all(|g| g.is_finite()) {
        return StepStatus::SkippedNonFinite;
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let next = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        if next.is_finite() {
            params[i] = next;
        }
    }
    StepStatus::Applied
}

/// Learning rate after `epoch` halvings.
pub fn epoch_decay(lr: f64, epoch: u32) -> f64 {
    lr * 0.5_f64.powi(epoch as i32)
}

#[derive(Debug, Clone)]
struct GroupState {
    generation: u64,
    moments: AdamMoments,
}

/// Optimizer bound to the parameter layout of one model.
///
/// Per-block state is matched to blocks by visit order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    groups: Vec<GroupState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            lr: config.lr,
            config,
            groups: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update from the gradients currently held by `model`.
    pub fn step<M: Trainable + ?Sized>(&mut self, model: &mut M) -> StepStatus {
        let mut finite = true;
        let mut sq = 0.0;
        model.visit_params(&mut |p| {
            for g in p.grads.iter() {
                finite &= g.is_finite();
                sq += g * g;
            }
        });
        if !finite {
            return StepStatus::SkippedNonFinite;
        }
        let scale = match self.config.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };

        let cfg = &self.config;
        let lr = self.lr;
        let groups = &mut self.groups;
        let mut idx = 0;
        model.visit_params(&mut |p| {
            if scale != 1.0 {
                p.grads.iter_mut().for_each(|g| *g *= scale);
            }
            match cfg.kind {
                OptimizerKind::Sgd => {
                    sgd_step(p.values, p.grads, lr);
                }
                OptimizerKind::Adam => {
                    if idx == groups.len() {
                        groups.push(GroupState {
                            generation: p.generation,
                            moments: AdamMoments::new(p.values.len()),
                        });
                    }
                    let g = &mut groups[idx];
                    if g.moments.m.len() != p.values.len() {
                        g.moments = AdamMoments::new(p.values.len());
                        g.generation = p.generation;
                    } else if g.generation != p.generation {
                        if cfg.reset_moments_on_merge && p.role == ParamRole::Perturbation {
                            g.moments.reset();
                        }
                        g.generation = p.generation;
                    }
                    adam_step(
                        &mut g.moments,
                        p.values,
                        p.grads,
                        lr,
                        cfg.beta1,
                        cfg.beta2,
                        cfg.eps,
                    );
                }
            }
            idx += 1;
        });
        StepStatus::Applied
    }
}
