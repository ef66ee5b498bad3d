use rand::RngCore;

use super::{Activation, AffineCoupling, BentLayer, CouplingSpec, FlowError, FlowStack, Permutation};
use crate::p4inv::{LayerInit, P4InvConfig, P4InvLayer};

/// The 2D density model: `blocks` repetitions of
/// `[P⁴Inv + bias, Bent, P⁴Inv + bias, inverse Bent]`, all matrices starting
/// at the identity.
pub fn p4inv_bent_2d(
    blocks: usize,
    config: &P4InvConfig,
    rng: &mut dyn RngCore,
) -> Result<FlowStack, FlowError> {
    let config = P4InvConfig {
        bias: true,
        ..config.clone()
    };
    let mut stack = FlowStack::new(2);
    for _ in 0..blocks {
        stack.push(P4InvLayer::new(2, LayerInit::Identity, config.clone(), rng)?)?;
        stack.push(BentLayer::new(2))?;
        stack.push(P4InvLayer::new(2, LayerInit::Identity, config.clone(), rng)?)?;
        stack.push(BentLayer::inverted(2))?;
    }
    Ok(stack)
}

/// RealNVP baseline for 2D data. Each of the `layers` layers transforms both
/// coordinates in turn, with `tanh` conditioners of the given hidden widths.
pub fn rnvp_2d(layers: usize, hidden: &[usize], rng: &mut dyn RngCore) -> FlowStack {
    let mut stack = FlowStack::new(2);
    for _ in 0..layers {
        for first in [true, false] {
            let spec = CouplingSpec::new(2, first, hidden, Activation::Tanh);
            stack
                .push(AffineCoupling::new(spec, rng))
                .expect("dimension is fixed");
        }
    }
    stack
}

/// RNVP, P⁴Inv, RNVP, P⁴Inv. Each coupling keeps the first `dim / 2`
/// coordinates and transforms the rest; the linear layers start as the
/// reverse permutation so the untrained block only reorders coordinates.
pub fn build_p4swap_block(
    dim: usize,
    rnvp_hidden: &[usize],
    p4_config: &P4InvConfig,
    rng: &mut dyn RngCore,
) -> Result<FlowStack, FlowError> {
    assert!(dim >= 2, "a coupling block needs at least two dimensions");
    let mut stack = FlowStack::new(dim);
    for _ in 0..2 {
        let spec = CouplingSpec::new(dim, true, rnvp_hidden, Activation::Relu);
        stack.push(AffineCoupling::new(spec, rng))?;
        stack.push(P4InvLayer::new(
            dim,
            LayerInit::ReversePermutation,
            p4_config.clone(),
            rng,
        )?)?;
    }
    Ok(stack)
}

/// The baseline block: as [`build_p4swap_block`] with fixed swaps
/// `(x₁, x₂) ↦ (x₂, x₁)` in place of the linear layers.
pub fn build_swap_block(dim: usize, rnvp_hidden: &[usize], rng: &mut dyn RngCore) -> FlowStack {
    assert!(dim >= 2, "a coupling block needs at least two dimensions");
    let mut stack = FlowStack::new(dim);
    for _ in 0..2 {
        let spec = CouplingSpec::new(dim, true, rnvp_hidden, Activation::Relu);
        stack
            .push(AffineCoupling::new(spec, rng))
            .expect("dimension is fixed");
        stack
            .push(Permutation::swap(dim, dim / 2))
            .expect("dimension is fixed");
    }
    stack
}
