use super::*;
use crate::linalg::oracle::lu_det;
use crate::p4core::Trainable;
use crate::p4inv::{LayerInit, P4InvConfig, P4InvLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Quadratic(usize);

impl Energy for Quadratic {
    fn dim(&self) -> usize {
        self.0
    }

    fn energy(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn energy_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.copy_from_slice(x);
        self.energy(x)
    }
}

fn normal_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Adds noise to every parameter so no layer sits at its identity point.
fn jitter(stack: &mut FlowStack, rng: &mut ChaCha8Rng, scale: f64) {
    stack.visit_params(&mut |p| {
        for v in p.values.iter_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    });
}

fn random_2d_stack(seed: u64, blocks: usize) -> FlowStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = P4InvConfig::default();
    let mut stack = p4inv_bent_2d(blocks, &cfg, &mut rng).unwrap();
    jitter(&mut stack, &mut rng, 0.2);
    stack
}

#[test]
fn empty_stack_density() {
    let stack = FlowStack::new(2);
    let x = DenseMatrix::zeros(1, 2);
    let lp = stack.log_density(&x).unwrap();
    assert!((lp[0] + LOG_2PI).abs() < 1e-15);
}

#[test]
fn fresh_p4inv_density_is_base_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stack = FlowStack::new(3);
    stack
        .push(P4InvLayer::new(3, LayerInit::Identity, P4InvConfig::default(), &mut rng).unwrap())
        .unwrap();
    let x = normal_batch(&mut rng, 5, 3);
    assert_eq!(stack.log_density(&x).unwrap(), stack.base_log_density(&x));
}

#[test]
fn fresh_2d_model_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let stack = p4inv_bent_2d(10, &P4InvConfig::default(), &mut rng).unwrap();
    let x = normal_batch(&mut rng, 20, 2);
    let (y, ld) = stack.forward(&x).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-12);
    assert!(ld.iter().all(|v| v.abs() < 1e-12));
    let mut counted = 0;
    let mut s = stack.clone();
    s.visit_params(&mut |p| counted += p.values.len());
    assert_eq!(counted, 10 * 12);
}

#[test]
fn rnvp_baseline_parameter_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut stack = rnvp_2d(5, &[6, 6], &mut rng);
    assert_eq!(stack.num_params(), 1220);
}

#[test]
fn density_matches_numerical_jacobian() {
    let stack = random_2d_stack(3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-5;
    for _ in 0..50 {
        let x = normal_batch(&mut rng, 1, 2);
        // q(x) = p(z) |det ∂z/∂x| with z = F⁻¹(x).
        let mut jac = DenseMatrix::zeros(2, 2);
        for j in 0..2 {
            let mut xp = x.clone();
            xp[(0, j)] += h;
            let mut xm = x.clone();
            xm[(0, j)] -= h;
            let zp = stack.inverse(&xp).unwrap().0;
            let zm = stack.inverse(&xm).unwrap().0;
            for i in 0..2 {
                jac[(i, j)] = (zp[(0, i)] - zm[(0, i)]) / (2.0 * h);
            }
        }
        let z = stack.inverse(&x).unwrap().0;
        let numeric = stack.base_log_density(&z)[0] + lu_det(&jac).unwrap().log_abs;
        let analytic = stack.log_density(&x).unwrap()[0];
        assert!((numeric.exp() - analytic.exp()).abs() / analytic.exp() <= 1e-6);
    }
}

#[test]
fn roundtrip_and_antisymmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = P4InvConfig::default();
    let mut stacks = vec![random_2d_stack(6, 8), rnvp_2d(5, &[6, 6], &mut rng)];
    let mut block = build_p4swap_block(16, &[32, 32], &cfg, &mut rng).unwrap();
    jitter(&mut block, &mut rng, 0.05);
    stacks.push(block);
    for stack in &mut stacks {
        jitter(stack, &mut rng, 0.05);
        let x = normal_batch(&mut rng, 256, stack.dim());
        let (y, ld) = stack.forward(&x).unwrap();
        let (back, ld_inv) = stack.inverse(&y).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-8);
        for (a, b) in ld.iter().zip(&ld_inv) {
            assert!((a + b).abs() <= 1e-8);
        }
    }
}

#[test]
fn identity_flow_losses() {
    let mut stack = FlowStack::new(3);
    let zero = DenseMatrix::zeros(4, 3);
    let c = 1.5 * LOG_2PI;
    assert!((stack.nll_loss(&zero).unwrap() - c).abs() < 1e-15);
    let x = DenseMatrix::from_row_major(1, 3, vec![1.0, 2.0, -2.0]).unwrap();
    assert!((stack.nll_loss(&x).unwrap() - (4.5 + c)).abs() < 1e-14);
    assert_eq!(stack.energy_loss(&zero, &Quadratic(3)).unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = normal_batch(&mut rng, 20000, 3);
    let je = stack.energy_loss(&z, &Quadratic(3)).unwrap();
    // Var of ½‖z‖² is n/2; standard error √(1.5/20000) ≈ 0.009.
    assert!((je - 1.5).abs() < 0.05, "{je}");
}

#[test]
fn mixed_loss_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut stack = random_2d_stack(9, 2);
    let x = normal_batch(&mut rng, 16, 2);
    let z = normal_batch(&mut rng, 16, 2);
    let e = Quadratic(2);
    let nll = stack.nll_loss(&x).unwrap();
    let je = stack.energy_loss(&z, &e).unwrap();
    let pure_l = LossWeights { likelihood: 1.0, energy: 0.0 };
    let pure_e = LossWeights { likelihood: 0.0, energy: 1.0 };
    assert_eq!(stack.mixed_loss(pure_l, &x, &z, &e).unwrap(), nll);
    assert_eq!(stack.mixed_loss(pure_e, &x, &z, &e).unwrap(), je);
    let w = LossWeights::from_ratio(0.05);
    assert!((w.energy / w.likelihood - 0.05).abs() < 1e-15);
    assert!((w.energy + w.likelihood - 1.0).abs() < 1e-15);
}

fn flat_grads(stack: &mut FlowStack) -> Vec<f64> {
    let mut g = Vec::new();
    stack.visit_params(&mut |p| g.extend_from_slice(p.grads));
    g
}

fn perturb_param(stack: &mut FlowStack, k: usize, delta: f64) {
    let mut i = 0;
    stack.visit_params(&mut |p| {
        for v in p.values.iter_mut() {
            if i == k {
                *v += delta;
            }
            i += 1;
        }
    });
}

fn check_loss_gradient(stack: &mut FlowStack, mut loss: impl FnMut(&mut FlowStack) -> f64) {
    stack.zero_grads();
    loss(stack);
    let analytic = flat_grads(stack);
    let h = 1e-5;
    for (k, a) in analytic.iter().enumerate() {
        perturb_param(stack, k, h);
        let lp = loss(stack);
        perturb_param(stack, k, -2.0 * h);
        let lm = loss(stack);
        perturb_param(stack, k, h);
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
        assert!(err <= 1e-5, "param {k}: analytic {a} vs fd {fd}");
    }
}

#[test]
fn nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut stack = random_2d_stack(11, 2);
    let x = normal_batch(&mut rng, 8, 2);
    check_loss_gradient(&mut stack, |s| s.nll_loss(&x).unwrap());
}

#[test]
fn penalized_nll_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = P4InvConfig {
        penalty: 0.5,
        bounds: crate::p4inv::MergeBounds {
            c_min: -0.01,
            c_max: 0.01,
            ..Default::default()
        },
        ..P4InvConfig::default()
    };
    let mut stack = p4inv_bent_2d(2, &cfg, &mut rng).unwrap();
    jitter(&mut stack, &mut rng, 0.3);
    assert!(stack.total_penalty() > 0.0);
    let x = normal_batch(&mut rng, 8, 2);
    check_loss_gradient(&mut stack, |s| s.nll_loss(&x).unwrap());
}

#[test]
fn energy_and_mixed_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = P4InvConfig::default();
    let mut stack = build_p4swap_block(4, &[8], &cfg, &mut rng).unwrap();
    jitter(&mut stack, &mut rng, 0.2);
    let x = normal_batch(&mut rng, 6, 4);
    let z = normal_batch(&mut rng, 6, 4);
    let e = Quadratic(4);
    check_loss_gradient(&mut stack, |s| s.energy_loss(&z, &e).unwrap());
    let w = LossWeights::from_ratio(0.05);
    check_loss_gradient(&mut stack, |s| s.mixed_loss(w, &x, &z, &e).unwrap());
}

#[test]
fn fresh_p4swap_block_is_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let block = build_p4swap_block(6, &[16], &P4InvConfig::default(), &mut rng).unwrap();
    let x = normal_batch(&mut rng, 3, 6);
    let (y, ld) = block.forward(&x).unwrap();
    // Two reversals cancel.
    assert_eq!(y, x);
    assert_eq!(ld, [0.0; 3]);

    let baseline = build_swap_block(6, &[16], &mut rng);
    let (y, ld) = baseline.forward(&x).unwrap();
    assert_eq!(y, x);
    assert_eq!(ld, [0.0; 3]);

    let mut half = FlowStack::new(6);
    half.push(P4InvLayer::new(6, LayerInit::ReversePermutation, P4InvConfig::default(), &mut rng).unwrap())
        .unwrap();
    let (y, _) = half.forward(&x).unwrap();
    for r in 0..3 {
        for i in 0..6 {
            assert_eq!(y[(r, i)], x[(r, 5 - i)]);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let cfg = P4InvConfig::default();
    let mut stack = build_p4swap_block(4, &[8], &cfg, &mut rng).unwrap();
    stack.append(build_swap_block(4, &[8], &mut rng)).unwrap();
    stack.push(BentLayer::inverted(4)).unwrap();
    jitter(&mut stack, &mut rng, 0.1);
    let json = stack.to_json().unwrap();
    let back = FlowStack::from_json(&json, &mut rng).unwrap();
    let x = normal_batch(&mut rng, 10, 4);
    let a = stack.log_density(&x).unwrap();
    let b = back.log_density(&x).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-10);
    }
    assert!(FlowStack::from_json("{\"format\":\"x\",\"dim\":2,\"layers\":[]}", &mut rng).is_err());
}
