//! Invertible linear layers trained through rank-one perturbations.
//!
//! A [`P4InvLayer`] stores a frozen matrix `A` together with its inverse and
//! determinant. Training only touches the perturbation `(u, v)` (and the
//! bias); the layer acts as `x ↦ (A + u vᵀ) x + b`. Inverse and log-determinant
//! of the perturbed matrix come from the Sherman-Morrison formula and the
//! matrix determinant lemma, so no step costs more than O(n²). Merging folds
//! `u vᵀ` into `A`, updates the stored inverse and determinant the same way,
//! and restarts the perturbation from `u = 0` with a fresh random `v`.

mod config;
mod layer;

pub use config::{MergeBounds, P4InvConfig};
pub use layer::{LayerInit, LayerState, P4InvLayer};

use crate::linalg::LinalgError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum P4InvError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("perturbed layer is singular (determinant factor {factor:e})")]
    Singular { factor: f64 },
    #[error("invalid layer configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid layer state: {0}")]
    InvalidState(String),
}
