//! Property-preserving parameter perturbation (P⁴) training.
//!
//! The optimizer trains a cheap perturbation of frozen parameters and the
//! perturbation is merged into them on a schedule. [`p4inv::P4InvLayer`]
//! applies this to invertible linear layers: the perturbation is rank one,
//! and the stored inverse and determinant follow every merge through the
//! Sherman-Morrison formula and the matrix determinant lemma. [`flows`]
//! builds normalizing flows on top of these layers.
//!
//! ```
//! use p4flow::p4inv::{LayerInit, P4InvConfig, P4InvLayer};
//! use rand::SeedableRng;
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
//! let mut layer = P4InvLayer::new(3, LayerInit::Identity, P4InvConfig::default(), &mut rng).unwrap();
//! layer.u_mut().copy_from_slice(&[0.5, 0.0, -0.2]);
//! let y = layer.forward(&[1.0, 2.0, 3.0]);
//! let x = layer.inverse(&y).unwrap();
//! assert!((x[0] - 1.0).abs() < 1e-12 && (x[2] - 3.0).abs() < 1e-12);
//! ```

pub mod linalg;
pub mod optim;
pub mod p4core;
pub mod p4inv;
pub mod flows;
pub mod data;
pub mod experiment;

mod serde_ext;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rank-one.md")]
    mod rank_one {}
    #[doc = include_str!("../../../book/src/perturbation-training.md")]
    mod perturbation_training {}
    #[doc = include_str!("../../../book/src/invertible-layer.md")]
    mod invertible_layer {}
    #[doc = include_str!("../../../book/src/flows.md")]
    mod flows {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
