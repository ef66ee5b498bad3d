use p4flow::data::{LinearTarget, TargetDescriptor, Toy2D};
use p4flow::experiment::{jitter_params, roundtrip_errors};
use p4flow::flows::{
    bent_forward, bent_inverse, p4inv_bent_2d, rnvp_2d, Activation, AffineCoupling, Bijection,
    CouplingSpec, FlowStack,
};
use p4flow::linalg::oracle::{lu_det, lu_invert};
use p4flow::linalg::rank_one::{det_lemma_factor, newton_schulz_step, sherman_morrison_update};
use p4flow::linalg::{DenseMatrix, SignLogDet};
use p4flow::optim::{adam_step, sgd_step, AdamMoments};
use p4flow::p4core::merge_noop_check;
use p4flow::p4inv::{LayerInit, MergeBounds, P4InvConfig, P4InvLayer};
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rows: usize, cols: usize, scale: f64, rng: &mut dyn RngCore) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vec(n: usize, scale: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn near_identity(n: usize, spread: f64, rng: &mut dyn RngCore) -> DenseMatrix {
    let mut a = normal(n, n, spread / (n as f64).sqrt(), rng);
    for i in 0..n {
        a.as_mut_slice()[i * n + i] += 1.0;
    }
    a
}

/// `(A, A⁻¹, u, v)` with `A` near the identity and `u`, `v` of unit scale.
fn rank_one_case(n: usize, seed: u64) -> (DenseMatrix, DenseMatrix, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = near_identity(n, 0.5, &mut rng);
    let a_inv = lu_invert(&a).unwrap();
    let s = 1.0 / (n as f64).sqrt();
    let u = normal_vec(n, s, &mut rng);
    let v = normal_vec(n, s, &mut rng);
    (a, a_inv, u, v)
}

fn layer(n: usize, cfg: P4InvConfig, rng: &mut ChaCha8Rng) -> P4InvLayer {
    let init = near_identity(n, 0.5, rng);
    P4InvLayer::new(n, LayerInit::Given(init), cfg, rng).unwrap()
}

fn set_perturbation(layer: &mut P4InvLayer, scale: f64, rng: &mut ChaCha8Rng) {
    let n = layer.dim();
    let u = normal_vec(n, scale / (n as f64).sqrt(), rng);
    let v = normal_vec(n, 1.0, rng);
    layer.u_mut().copy_from_slice(&u);
    layer.v_mut().copy_from_slice(&v);
}

proptest! {
    #[test]
    fn sherman_morrison_matches_lu(n in 1usize..=16, seed: u64) {
        let (a, a_inv, u, v) = rank_one_case(n, seed);
        let g = det_lemma_factor(&a_inv, &u, &v).unwrap();
        prop_assume!(g.abs() > 1e-3);
        let mut b = a.clone();
        b.add_outer(1.0, &u, &v);
        let sm = sherman_morrison_update(&a_inv, &u, &v).unwrap();
        prop_assert!(sm.max_abs_diff(&lu_invert(&b).unwrap()) <= 1e-10);
    }

    #[test]
    fn determinant_lemma_matches_lu(n in 1usize..=16, seed: u64) {
        let (a, a_inv, u, v) = rank_one_case(n, seed);
        let g = det_lemma_factor(&a_inv, &u, &v).unwrap();
        prop_assume!(g.abs() > 1e-6);
        let mut b = a.clone();
        b.add_outer(1.0, &u, &v);
        let lemma = SignLogDet::from_value(g) * lu_det(&a).unwrap();
        let direct = lu_det(&b).unwrap();
        prop_assert_eq!(lemma.sign, direct.sign);
        prop_assert!((lemma.log_abs - direct.log_abs).abs() <= 1e-10);
    }

    #[test]
    fn newton_schulz_contracts(n in 1usize..=24, seed: u64, size in 1e-6f64..0.45) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = near_identity(n, 0.5, &mut rng);
        let exact = lu_invert(&a).unwrap();
        let mut x = normal(n, n, 1.0, &mut rng);
        // Scale the error so that ‖I − A X‖∞ is exactly `size`.
        let err = a.matmul(&x).unwrap().norm_inf();
        x.as_mut_slice().iter_mut().for_each(|e| *e *= size / err);
        let approx = DenseMatrix::from_fn(n, n, |i, j| exact.row(i)[j] + x.row(i)[j]);
        let before = a.inverse_residual(&approx).unwrap();
        prop_assume!(before < 0.5);
        let after = a.inverse_residual(&newton_schulz_step(&a, &approx).unwrap()).unwrap();
        prop_assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn sign_log_det_composes_like_products(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        prop_assume!(a != 0.0 && b != 0.0);
        let composed = SignLogDet::from_value(a) * SignLogDet::from_value(b);
        let direct = SignLogDet::from_value(a * b);
        prop_assert_eq!(composed.sign, direct.sign);
        prop_assert!((composed.log_abs - direct.log_abs).abs() <= 1e-12);
    }

    #[test]
    fn bent_inverts(x in -1e3f64..1e3) {
        let (y, ld) = bent_forward(x);
        let (back, ld_inv) = bent_inverse(y);
        prop_assert!((back - x).abs() <= 1e-12 * (1.0 + x.abs()));
        prop_assert!((ld + ld_inv).abs() <= 1e-12);
    }

    #[test]
    fn optimizers_never_write_non_finite(
        params in prop::collection::vec(-1e3f64..1e3, 1..20),
        seed: u64,
        lr in prop::sample::select(vec![1e-3, 1.0, 1e300]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specials = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY, 1e308, -1e308];
        let grads: Vec<f64> = (0..params.len())
            .map(|_| {
                if rng.random_bool(0.3) {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    rng.sample(StandardNormal)
                }
            })
            .collect();
        let mut p = params.clone();
        sgd_step(&mut p, &grads, lr);
        prop_assert!(p.iter().all(|x| x.is_finite()));
        let mut p = params.clone();
        let mut m = AdamMoments::new(p.len());
        adam_step(&mut m, &mut p, &grads, lr, 0.9, 0.999, 1e-8);
        prop_assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sgd_is_the_plain_update(
        params in prop::collection::vec(-10f64..10.0, 1..20),
        seed: u64,
        lr in 1e-4f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads = normal_vec(params.len(), 1.0, &mut rng);
        let mut p = params.clone();
        sgd_step(&mut p, &grads, lr);
        for ((got, p0), g) in p.iter().zip(&params).zip(&grads) {
            prop_assert_eq!(got.to_bits(), (p0 - lr * g).to_bits());
        }
    }

    #[test]
    fn generators_are_deterministic(n in 1usize..=16, seed: u64, kind in 0usize..3) {
        let descriptor = match kind {
            0 => TargetDescriptor::PositiveDefinite { n },
            1 => TargetDescriptor::SpecialOrthogonal { n },
            _ => TargetDescriptor::NegIdentity { n },
        };
        let a = LinearTarget::generate(descriptor, seed);
        let b = LinearTarget::generate(descriptor, seed);
        prop_assert_eq!(a.matrix, b.matrix);
        for toy in Toy2D::ALL {
            prop_assert_eq!(toy.sample_seeded(16, seed), toy.sample_seeded(16, seed));
        }
    }

    #[test]
    fn coupling_keeps_passive_half(dim in 2usize..=6, first: bool, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = CouplingSpec::new(dim, first, &[5], Activation::Relu);
        let passive = if first { 0..dim / 2 } else { dim / 2..dim };
        let mut coupling = AffineCoupling::new(spec, &mut rng);
        jitter_params(&mut coupling, 0.5, &mut rng);
        let x = normal(8, dim, 2.0, &mut rng);
        let (y, _) = coupling.forward(&x).unwrap();
        let (back, _) = coupling.inverse(&x).unwrap();
        for r in 0..8 {
            for c in passive.clone() {
                prop_assert_eq!(y.row(r)[c].to_bits(), x.row(r)[c].to_bits());
                prop_assert_eq!(back.row(r)[c].to_bits(), x.row(r)[c].to_bits());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn merges_preserve_the_layer_function(
        n in 1usize..=12,
        seed: u64,
        n_force in 1u64..4,
        scale in 0.01f64..3.0,
        tight: bool,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bounds = if tight {
            // Rejects most candidates so forced merges happen too.
            MergeBounds { c_min0: -0.05, c_max0: 0.05, ..MergeBounds::default() }
        } else {
            MergeBounds::default()
        };
        let cfg = P4InvConfig { n_force, bounds, ..P4InvConfig::default() };
        let mut l = layer(n, cfg, &mut rng);
        jitter_params(&mut l, 0.1, &mut rng);
        let probes = normal(64, n, 1.0, &mut rng);
        for _ in 0..20 {
            set_perturbation(&mut l, scale, &mut rng);
            prop_assume!(l.factor().abs() > 1e-300);
            let before = l.forward_batch(&probes);
            let outcome = l.attempt_merge(&mut rng);
            if outcome.tag.accepted() {
                let after = l.forward_batch(&probes);
                prop_assert!(merge_noop_check(before.as_slice(), after.as_slice()) <= 1e-10);
            }
        }
    }

    #[test]
    fn stored_determinant_tracks_lu(n in 1usize..=64, seed: u64, merges in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = layer(n, P4InvConfig::default(), &mut rng);
        for _ in 0..merges {
            set_perturbation(&mut l, 0.3, &mut rng);
            if l.attempt_merge(&mut rng).tag.accepted() {
                let lu = lu_det(l.frozen_matrix()).unwrap();
                let stored = l.frozen_det();
                prop_assert_eq!(stored.sign, lu.sign);
                prop_assert!((stored.log_abs - lu.log_abs).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn reset_restores_the_frozen_map(n in 1usize..=12, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = layer(n, P4InvConfig::default(), &mut rng);
        jitter_params(&mut l, 0.5, &mut rng);
        l.reset(&mut rng);
        prop_assert!(l.u().as_slice().iter().all(|&x| x.to_bits() == 0));
        let x = normal_vec(n, 1.0, &mut rng);
        let got = l.forward(&x);
        let mut want = l.frozen_matrix().mul_vec(&x).unwrap();
        for (w, b) in want.as_mut_slice().iter_mut().zip(l.bias().as_slice()) {
            *w += b;
        }
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            prop_assert_eq!(g.to_bits(), w.to_bits());
        }
    }

    #[test]
    fn flow_stacks_invert(seed: u64, blocks in 1usize..6, jitter in 0.0f64..0.3, rnvp: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack: FlowStack = if rnvp {
            rnvp_2d(blocks, &[6, 6], &mut rng)
        } else {
            p4inv_bent_2d(blocks, &P4InvConfig::default(), &mut rng).unwrap()
        };
        jitter_params(&mut stack, jitter, &mut rng);
        let (rt, anti) = roundtrip_errors(&stack, 256, 1.0, &mut rng).unwrap();
        prop_assert!(rt <= 1e-8, "roundtrip {rt}");
        prop_assert!(anti <= 1e-8, "antisymmetry {anti}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn long_merge_sequences_keep_the_inverse(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = P4InvConfig { n_correct: 50, ..P4InvConfig::default() };
        let mut l = layer(32, cfg, &mut rng);
        let mut accepted = 0;
        while accepted < 150 {
            set_perturbation(&mut l, 0.3, &mut rng);
            // Keep the sequence well conditioned.
            if l.factor().abs().ln().abs() > 2.0 {
                l.reset(&mut rng);
                continue;
            }
            if l.attempt_merge(&mut rng).tag.accepted() {
                accepted += 1;
            }
        }
        prop_assert!(l.inverse_residual() <= 1e-5, "residual {}", l.inverse_residual());
    }
}
