//! Fast self-checks of the numerical invariants, used by `p4flow verify` and
//! the test suites.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{make_positive_definite, make_special_orthogonal};
use crate::flows::{
    build_p4swap_block, p4inv_bent_2d, rnvp_2d, Activation, AffineCoupling, BentLayer, Bijection,
    CouplingSpec, FlowError, FlowStack, Mlp,
};
use crate::linalg::oracle::{lu_decompose, symmetric_eigenvalues};
use crate::linalg::rank_one::{det_lemma_factor, sherman_morrison_update};
use crate::linalg::{DenseMatrix, SignLogDet};
use crate::p4core::{merge_noop_check, Perturbation, Trainable};
use crate::p4inv::{LayerInit, MergeBounds, P4InvConfig, P4InvLayer};

/// Absolute floor of the relative-error denominator in gradient checks.
/// Central differences at `h = 1e-5` carry about `1e-10` of rounding noise,
/// which would dominate the relative error of components near zero.
pub const GRADIENT_FLOOR: f64 = 1e-4;

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRADIENT_FLOOR)
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut dyn RngCore) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vec(n: usize, scale: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Adds `scale·N(0, 1)` noise to every trainable parameter.
pub fn jitter_params<T: Trainable + ?Sized>(model: &mut T, scale: f64, rng: &mut dyn RngCore) {
    model.visit_params(&mut |p| {
        for v in p.values.iter_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    });
}

fn flat_grads<T: Trainable + ?Sized>(model: &mut T) -> Vec<f64> {
    let mut g = Vec::new();
    model.visit_params(&mut |p| g.extend_from_slice(p.grads));
    g
}

fn nudge<T: Trainable + ?Sized>(model: &mut T, k: usize, delta: f64) {
    let mut i = 0;
    model.visit_params(&mut |p| {
        let len = p.values.len();
        if (i..i + len).contains(&k) {
            p.values[k - i] += delta;
        }
        i += len;
    });
}

/// Largest relative error between the analytic and central-difference
/// gradients of `L = Σ c ⊙ f(x) + Σ d ⊙ logdet + penalty`, with random
/// weights `c`, `d`, over all parameters and all input entries. `f` is the
/// forward map, or the inverse map when `inverse` is set.
pub fn bijection_gradient_error<B: Bijection + ?Sized>(
    model: &mut B,
    x: &DenseMatrix,
    inverse: bool,
    rng: &mut dyn RngCore,
) -> Result<f64, FlowError> {
    let c = normal_matrix(x.rows(), x.cols(), 1.0, rng);
    let d = normal_vec(x.rows(), 1.0, rng);
    let loss = |m: &B, input: &DenseMatrix| -> Result<f64, FlowError> {
        let (y, ld) = if inverse { m.inverse(input)? } else { m.forward(input)? };
        let data: f64 = y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum();
        let det: f64 = ld.iter().zip(&d).map(|(a, b)| a * b).sum();
        Ok(data + det + m.penalty())
    };

    model.zero_grads();
    let grad_x = if inverse {
        model.backward_inverse(x, &c, &d)?
    } else {
        model.backward(x, &c, &d)?
    };
    model.penalty_backward(1.0);
    let analytic = flat_grads(model);

    let h = FD_STEP;
    let mut worst = 0.0_f64;
    for (k, a) in analytic.iter().enumerate() {
        nudge(model, k, h);
        let lp = loss(model, x)?;
        nudge(model, k, -2.0 * h);
        let lm = loss(model, x)?;
        nudge(model, k, h);
        worst = worst.max(rel_err(*a, (lp - lm) / (2.0 * h)));
    }
    for k in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[k] += h;
        let mut xm = x.clone();
        xm.as_mut_slice()[k] -= h;
        let fd = (loss(model, &xp)? - loss(model, &xm)?) / (2.0 * h);
        worst = worst.max(rel_err(grad_x.as_slice()[k], fd));
    }
    Ok(worst)
}

/// As [`bijection_gradient_error`] for `L = Σ c ⊙ mlp(x)`.
pub fn mlp_gradient_error(mlp: &mut Mlp, x: &DenseMatrix, rng: &mut dyn RngCore) -> f64 {
    let c = normal_matrix(x.rows(), mlp.output_dim(), 1.0, rng);
    let loss = |m: &Mlp, input: &DenseMatrix| -> f64 {
        m.forward(input)
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    };
    mlp.zero_grads();
    let acts = mlp.forward_cached(x);
    let grad_x = mlp.backward(&acts, &c);
    let analytic = mlp.grads().to_vec();
    let h = FD_STEP;
    let mut worst = 0.0_f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut p = mlp.clone();
        p.params_mut()[k] += h;
        let lp = loss(&p, x);
        p.params_mut()[k] -= 2.0 * h;
        let lm = loss(&p, x);
        worst = worst.max(rel_err(*a, (lp - lm) / (2.0 * h)));
    }
    for k in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[k] += h;
        let mut xm = x.clone();
        xm.as_mut_slice()[k] -= h;
        let fd = (loss(mlp, &xp) - loss(mlp, &xm)) / (2.0 * h);
        worst = worst.max(rel_err(grad_x.as_slice()[k], fd));
    }
    worst
}

/// Worst deviations between rank-one updates and LU recomputation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RankOneErrors {
    pub cases: usize,
    pub max_inverse_error: f64,
    pub max_log_det_error: f64,
    pub sign_mismatches: usize,
}

/// Draws `cases` random `(A, u, v)` with `n ≤ max_n` and `|G| > 1e-3`, and
/// compares the Sherman-Morrison inverse and determinant-lemma determinant
/// of `A + u vᵀ` with LU results.
pub fn rank_one_oracle_errors(cases: usize, max_n: usize, rng: &mut dyn RngCore) -> RankOneErrors {
    let mut out = RankOneErrors {
        cases,
        ..Default::default()
    };
    let mut done = 0;
    while done < cases {
        let n = rng.random_range(1..=max_n);
        let s = 1.0 / (n as f64).sqrt();
        let mut a = normal_matrix(n, n, 0.5 * s, rng);
        for i in 0..n {
            a.as_mut_slice()[i * n + i] += 1.0;
        }
        let u = normal_vec(n, s, rng);
        let v = normal_vec(n, s, rng);
        let Ok(lu) = lu_decompose(&a) else { continue };
        let a_inv = lu.inverse();
        let Ok(g) = det_lemma_factor(&a_inv, &u, &v) else { continue };
        if !(g.abs() > 1e-3) {
            continue;
        }
        let mut b = a.clone();
        b.add_outer(1.0, &u, &v);
        let Ok(lu_b) = lu_decompose(&b) else { continue };
        let Ok(sm) = sherman_morrison_update(&a_inv, &u, &v) else { continue };
        out.max_inverse_error = out.max_inverse_error.max(sm.max_abs_diff(&lu_b.inverse()));
        let lemma = SignLogDet::from_value(g) * lu.det();
        let direct = lu_b.det();
        if lemma.sign != direct.sign {
            out.sign_mismatches += 1;
        }
        out.max_log_det_error = out
            .max_log_det_error
            .max((lemma.log_abs - direct.log_abs).abs());
        done += 1;
    }
    out
}

/// Runs `cycles` rounds of "perturb randomly, merge" on a layer of size `n`
/// and returns the worst relative change of the effective matrix across a
/// merge, together with the number of accepted merges.
pub fn merge_noop_error(n: usize, cycles: usize, rng: &mut dyn RngCore) -> Result<(f64, usize), FlowError> {
    let s = 1.0 / (n as f64).sqrt();
    let mut init = normal_matrix(n, n, 0.3 * s, rng);
    for i in 0..n {
        init.as_mut_slice()[i * n + i] += 1.0;
    }
    let mut layer = P4InvLayer::new(n, LayerInit::Given(init), P4InvConfig::default(), rng)?;
    let mut worst = 0.0_f64;
    let mut accepted = 0;
    for _ in 0..cycles {
        let u = normal_vec(n, 0.1 * s, rng);
        layer.u_mut().copy_from_slice(&u);
        let before = layer.effective();
        let outcome = layer.attempt_merge(rng);
        if outcome.tag.accepted() {
            accepted += 1;
        }
        worst = worst.max(merge_noop_check(&before, &layer.effective()));
        // A rejected merge keeps the perturbation; start the next cycle clean.
        layer.reset(rng);
    }
    Ok((worst, accepted))
}

/// Largest `|F⁻¹(F(x)) − x|` and `|ln|J_F(x)| + ln|J_F⁻¹(F(x))||` over
/// `probes` points drawn from `N(0, scale²)`.
pub fn roundtrip_errors<B: Bijection + ?Sized>(
    model: &B,
    probes: usize,
    scale: f64,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64), FlowError> {
    let x = normal_matrix(probes, model.dim(), scale, rng);
    let (y, ld_f) = model.forward(&x)?;
    let (back, ld_i) = model.inverse(&y)?;
    let antisym = ld_f
        .iter()
        .zip(&ld_i)
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);
    Ok((back.max_abs_diff(&x), antisym))
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

struct Checks(Vec<CheckResult>);

impl Checks {
    /// Records `value ≤ tolerance` (NaN fails).
    fn at_most(&mut self, name: &str, value: f64, tolerance: f64) {
        self.0.push(CheckResult {
            name: name.to_owned(),
            value,
            tolerance,
            passed: value <= tolerance,
        });
    }
}

/// Runs the invariant suite at a size that finishes in seconds.
pub fn run_verify(seed: u64) -> Result<VerifyReport, FlowError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Checks(Vec::new());

    let r1 = rank_one_oracle_errors(200, 16, &mut rng);
    c.at_most("rank-one inverse vs LU", r1.max_inverse_error, 1e-10);
    c.at_most("rank-one log-det vs LU", r1.max_log_det_error, 1e-10);
    c.at_most("rank-one det sign mismatches", r1.sign_mismatches as f64, 0.0);

    for n in [4, 16, 32] {
        let (dev, _) = merge_noop_error(n, 30, &mut rng)?;
        c.at_most(&format!("merge no-op (n={n})"), dev, 1e-12);
    }

    let mut worst = [0.0_f64; 6];
    for _ in 0..5 {
        let n = rng.random_range(1..=6);
        let cfg = P4InvConfig {
            penalty: 0.5,
            bounds: MergeBounds {
                c_min: -0.05,
                c_max: 0.05,
                ..MergeBounds::default()
            },
            ..P4InvConfig::default()
        };
        let mut layer = P4InvLayer::new(n, LayerInit::Identity, cfg, &mut rng)?;
        jitter_params(&mut layer, 0.3, &mut rng);
        let x = normal_matrix(4, n, 1.0, &mut rng);
        worst[0] = worst[0].max(bijection_gradient_error(&mut layer, &x, false, &mut rng)?);
        worst[1] = worst[1].max(bijection_gradient_error(&mut layer, &x, true, &mut rng)?);

        let dim = rng.random_range(2..=5);
        let spec = CouplingSpec::new(dim, rng.random(), &[5], Activation::Tanh);
        let mut coupling = AffineCoupling::new(spec, &mut rng);
        jitter_params(&mut coupling, 0.3, &mut rng);
        let x = normal_matrix(4, dim, 1.0, &mut rng);
        worst[2] = worst[2].max(bijection_gradient_error(&mut coupling, &x, false, &mut rng)?);
        worst[3] = worst[3].max(bijection_gradient_error(&mut coupling, &x, true, &mut rng)?);

        let mut mlp = Mlp::new(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], false, &mut rng);
        let x = normal_matrix(4, 3, 1.0, &mut rng);
        worst[4] = worst[4].max(mlp_gradient_error(&mut mlp, &x, &mut rng));

        let mut bent = BentLayer::new(3);
        let x = normal_matrix(4, 3, 2.0, &mut rng);
        worst[5] = worst[5]
            .max(bijection_gradient_error(&mut bent, &x, false, &mut rng)?)
            .max(bijection_gradient_error(&mut bent, &x, true, &mut rng)?);
    }
    for (name, w) in [
        "gradient: P4Inv forward",
        "gradient: P4Inv inverse",
        "gradient: coupling forward",
        "gradient: coupling inverse",
        "gradient: MLP",
        "gradient: Bent",
    ]
    .iter()
    .zip(worst)
    {
        c.at_most(name, w, 1e-5);
    }

    let mut p4 = p4inv_bent_2d(10, &P4InvConfig::default(), &mut rng)?;
    jitter_params(&mut p4, 0.2, &mut rng);
    let rnvp = rnvp_2d(5, &[6, 6], &mut rng);
    let mut block = build_p4swap_block(16, &[16], &P4InvConfig::default(), &mut rng)?;
    jitter_params(&mut block, 0.05, &mut rng);
    for (name, model) in [("2D P4Inv+Bent", &p4), ("RNVP", &rnvp), ("P4Inv swap block", &block)] {
        let (rt, anti) = roundtrip_errors::<FlowStack>(model, 256, 1.0, &mut rng)?;
        c.at_most(&format!("roundtrip: {name}"), rt, 1e-8);
        c.at_most(&format!("logdet antisymmetry: {name}"), anti, 1e-8);
    }

    let q = make_special_orthogonal(16, seed).matrix;
    let qtq = q.transpose().matmul(&q).expect("square");
    c.at_most("SO(16) orthogonality", qtq.max_abs_diff(&DenseMatrix::identity(16)), 1e-12);
    let pd = make_positive_definite(16, seed).matrix;
    let eig = symmetric_eigenvalues(&pd).expect("square");
    let spread = eig
        .iter()
        .map(|l| (l - 1.0).abs())
        .fold(0.0_f64, f64::max);
    c.at_most("positive-definite spectrum within [0.5, 1.5]", spread, 0.5);

    let passed = c.0.iter().all(|r| r.passed);
    Ok(VerifyReport {
        seed,
        checks: c.0,
        passed,
    })
}
