//! Targets for the linear experiments, 2D benchmark densities, and synthetic
//! energies. Every generator is a deterministic function of its seed or of
//! the generator handed to it.

mod energy;
mod linear;
mod toy;

pub use energy::{DoubleWell, GaussianMixture, SyntheticEnergy};
pub use linear::{
    make_positive_definite, make_positive_definite_with_eigenvalues, make_special_orthogonal,
    LinearTarget, TargetDescriptor,
};
pub use toy::{assign_to_modes, Toy2D};
