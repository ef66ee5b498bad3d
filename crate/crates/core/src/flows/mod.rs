//! Normalizing-flow building blocks.
//!
//! Every layer implements [`Bijection`] on batches stored one sample per row
//! of a [`DenseMatrix`]. A [`FlowStack`] composes layers; its `forward`
//! direction is the generative one, latent `z` to data `x`.

mod arch;
mod bent;
mod checkpoint;
mod coupling;
mod mlp;
mod p4inv;
mod permute;
mod stack;

pub use arch::{build_p4swap_block, build_swap_block, p4inv_bent_2d, rnvp_2d};
pub use bent::{bent, bent_derivative, bent_forward, bent_inverse, BentLayer};
pub use checkpoint::{LayerCheckpoint, StackCheckpoint, CHECKPOINT_FORMAT};
pub use coupling::{AffineCoupling, CouplingSpec};
pub use mlp::{Activation, Mlp};
pub use permute::Permutation;
pub use stack::{FlowLayer, FlowStack, LOG_2PI};

use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::p4core::P4Model;
use crate::p4inv::P4InvError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error(transparent)]
    Layer(#[from] P4InvError),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

/// A learnable bijection on `R^n`, evaluated on batches.
///
/// `forward` and `inverse` return the mapped batch and the per-sample
/// log-determinant of the Jacobian of the map that was applied, so the two
/// log-determinants at corresponding points sum to zero.
///
/// The backward passes recompute whatever they need from the pass input,
/// accumulate parameter gradients into the views exposed through
/// [`Trainable`](crate::p4core::Trainable), and return the gradient with
/// respect to the pass input. `grad_logdet[r]` is the derivative of the loss
/// with respect to the log-determinant of sample `r`.
pub trait Bijection: P4Model {
    fn dim(&self) -> usize;

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError>;

    fn inverse(&self, y: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError>;

    fn backward(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError>;

    fn backward_inverse(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError>;

    /// Regularization owned by the layer (the P⁴Inv determinant barrier).
    fn penalty(&self) -> f64 {
        0.0
    }

    /// Adds `scale · ∇penalty` to the gradients and returns the penalty.
    fn penalty_backward(&mut self, _scale: f64) -> f64 {
        0.0
    }
}

/// A differentiable scalar field, used as the target energy of a
/// Boltzmann-generator style loss.
pub trait Energy {
    fn dim(&self) -> usize;

    fn energy(&self, x: &[f64]) -> f64;

    /// Writes `∇u(x)` into `grad` and returns `u(x)`.
    fn energy_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

/// Relative weights of the likelihood and energy losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub likelihood: f64,
    pub energy: f64,
}

impl LossWeights {
    /// Weights summing to one with `energy / likelihood = ratio`.
    pub fn from_ratio(ratio: f64) -> Self {
        let likelihood = 1.0 / (1.0 + ratio);
        Self {
            likelihood,
            energy: 1.0 - likelihood,
        }
    }
}

pub(crate) fn check_dim(m: &DenseMatrix, expected: usize) -> Result<(), FlowError> {
    if m.cols() != expected {
        return Err(FlowError::Dimension {
            expected,
            found: m.cols(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests;
