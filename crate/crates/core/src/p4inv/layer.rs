use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{P4InvConfig, P4InvError};
use crate::linalg::rank_one::SINGULAR_FACTOR;
use crate::linalg::{
    axpy, dot, newton_schulz_refine, oracle, sherman_morrison_update, DenseMatrix, DenseVector,
    SignLogDet,
};
use crate::p4core::{
    MergeOutcome, MergeTag, P4Model, ParamRole, ParamView, Perturbation, Trainable,
};

/// Initial frozen matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerInit {
    Identity,
    /// `A_ij = 1` iff `i + j = n − 1`.
    ReversePermutation,
    /// An arbitrary invertible matrix; inverse and determinant are computed
    /// once by LU at construction.
    Given(DenseMatrix),
}

/// Frozen state of a layer, as persisted in checkpoints.
///
/// The perturbation is not part of the state: a state is always taken at a
/// reset point (see [`P4InvLayer::snapshot`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub n: usize,
    pub a: Vec<f64>,
    pub a_inv: Vec<f64>,
    pub det_sign: i8,
    pub det_log_abs: f64,
    pub bias: Vec<f64>,
}

/// Quantities shared by every row of a batched pass.
struct Perturbed {
    /// `A⁻¹ u`
    w: Vec<f64>,
    /// `A⁻ᵀ v`
    z: Vec<f64>,
    /// `1 + vᵀ A⁻¹ u`
    g: f64,
}

#[derive(Debug, Clone)]
pub struct P4InvLayer {
    a: DenseMatrix,
    a_inv: DenseMatrix,
    det: SignLogDet,
    u: DenseVector,
    v: DenseVector,
    bias: DenseVector,
    grad_u: DenseVector,
    grad_v: DenseVector,
    grad_bias: DenseVector,
    merge_count: u64,
    attempts_since_accept: u64,
    generation: u64,
    last_correction_residual: Option<f64>,
    config: P4InvConfig,
}

impl P4InvLayer {
    pub fn new(
        n: usize,
        init: LayerInit,
        config: P4InvConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self, P4InvError> {
        config.validate()?;
        let (a, a_inv, det) = match init {
            LayerInit::Identity => (DenseMatrix::identity(n), DenseMatrix::identity(n), SignLogDet::ONE),
            LayerInit::ReversePermutation => {
                let p = DenseMatrix::from_fn(n, n, |i, j| if i + j + 1 == n { 1.0 } else { 0.0 });
                // The reversal has n(n-1)/2 inversions.
                let sign = if (n * n.saturating_sub(1) / 2) % 2 == 0 { 1 } else { -1 };
                (p.clone(), p, SignLogDet::new(sign, 0.0))
            }
            LayerInit::Given(m) => {
                if m.rows() != n || m.cols() != n {
                    return Err(P4InvError::InvalidConfig(format!(
                        "initial matrix is {}x{}, layer is {n}x{n}",
                        m.rows(),
                        m.cols()
                    )));
                }
                let lu = oracle::lu_decompose(&m)?;
                (m, lu.inverse(), lu.det())
            }
        };
        let mut layer = Self {
            a,
            a_inv,
            det,
            u: DenseVector::zeros(n),
            v: DenseVector::zeros(n),
            bias: DenseVector::zeros(n),
            grad_u: DenseVector::zeros(n),
            grad_v: DenseVector::zeros(n),
            grad_bias: DenseVector::zeros(n),
            merge_count: 0,
            attempts_since_accept: 0,
            generation: 0,
            last_correction_residual: None,
            config,
        };
        layer.draw_v(rng);
        Ok(layer)
    }

    /// Builds a layer from a frozen state; the perturbation starts reset.
    pub fn from_state(
        state: &LayerState,
        config: P4InvConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self, P4InvError> {
        let n = state.n;
        if state.bias.len() != n {
            return Err(P4InvError::InvalidState(format!(
                "bias has length {}, expected {n}",
                state.bias.len()
            )));
        }
        let a = DenseMatrix::from_row_major(n, n, state.a.clone())?;
        let a_inv = DenseMatrix::from_row_major(n, n, state.a_inv.clone())?;
        if !(a.is_finite() && a_inv.is_finite() && state.det_log_abs.is_finite()) {
            return Err(P4InvError::InvalidState("non-finite entries".into()));
        }
        if !matches!(state.det_sign, 1 | -1) {
            return Err(P4InvError::InvalidState(format!(
                "determinant sign must be +1 or -1, got {}",
                state.det_sign
            )));
        }
        let mut layer = Self::new(n, LayerInit::Identity, config, rng)?;
        layer.a = a;
        layer.a_inv = a_inv;
        layer.det = SignLogDet::new(state.det_sign, state.det_log_abs);
        layer.bias = DenseVector::from_vec(state.bias.clone());
        Ok(layer)
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn config(&self) -> &P4InvConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut P4InvConfig {
        &mut self.config
    }

    pub fn frozen_matrix(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn frozen_inverse(&self) -> &DenseMatrix {
        &self.a_inv
    }

    pub fn frozen_det(&self) -> SignLogDet {
        self.det
    }

    pub fn u(&self) -> &DenseVector {
        &self.u
    }

    pub fn v(&self) -> &DenseVector {
        &self.v
    }

    pub fn bias(&self) -> &DenseVector {
        &self.bias
    }

    pub fn u_mut(&mut self) -> &mut DenseVector {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut DenseVector {
        &mut self.v
    }

    pub fn bias_mut(&mut self) -> &mut DenseVector {
        &mut self.bias
    }

    pub fn grad_u(&self) -> &DenseVector {
        &self.grad_u
    }

    pub fn grad_v(&self) -> &DenseVector {
        &self.grad_v
    }

    pub fn grad_bias(&self) -> &DenseVector {
        &self.grad_bias
    }

    /// Accepted merges so far (forced ones included).
    pub fn merge_count(&self) -> u64 {
        self.merge_count
    }

    /// Residual `‖I − A A_inv‖∞` seen by the most recent scheduled correction.
    pub fn last_correction_residual(&self) -> Option<f64> {
        self.last_correction_residual
    }

    fn draw_v(&mut self, rng: &mut dyn RngCore) {
        let scale = self.config.v_scale;
        for x in self.v.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = scale * z;
        }
    }

    fn perturbed(&self) -> Perturbed {
        let n = self.dim();
        let mut w = vec![0.0; n];
        self.a_inv.gemv_into(&self.u, &mut w);
        let mut z = vec![0.0; n];
        self.a_inv.gemv_transpose_into(&self.v, &mut z);
        let g = 1.0 + dot(&self.v, &w);
        Perturbed { w, z, g }
    }

    /// Determinant-lemma factor `G = 1 + vᵀ A⁻¹ u`.
    pub fn factor(&self) -> f64 {
        let mut w = vec![0.0; self.dim()];
        self.a_inv.gemv_into(&self.u, &mut w);
        1.0 + dot(&self.v, &w)
    }

    /// Determinant of `A + u vᵀ`.
    pub fn effective_det(&self) -> SignLogDet {
        SignLogDet::from_value(self.factor()) * self.det
    }

    /// `ln|det(A + u vᵀ)|`; `-inf` when the perturbed matrix is singular.
    pub fn log_abs_det(&self) -> f64 {
        let g = self.factor();
        if g == 0.0 {
            f64::NEG_INFINITY
        } else {
            g.abs().ln() + self.det.log_abs
        }
    }

    pub fn det_sign(&self) -> i8 {
        self.effective_det().sign
    }

    /// `A + u vᵀ`, materialized. Diagnostic only.
    pub fn effective_matrix(&self) -> DenseMatrix {
        let mut m = self.a.clone();
        m.add_outer(1.0, &self.u, &self.v);
        m
    }

    /// `‖A A_inv − I‖` (largest absolute entry) of the frozen pair. O(n³).
    pub fn inverse_residual(&self) -> f64 {
        self.a
            .inverse_residual(&self.a_inv)
            .expect("frozen matrices are square")
    }

    fn forward_row(&self, x: &[f64], out: &mut [f64]) {
        self.a.gemv_into(x, out);
        axpy(dot(&self.v, x), &self.u, out);
        if self.config.bias {
            axpy(1.0, &self.bias, out);
        }
    }

    fn inverse_row(&self, p: &Perturbed, y: &[f64], shifted: &mut [f64], out: &mut [f64]) {
        shifted.copy_from_slice(y);
        if self.config.bias {
            axpy(-1.0, &self.bias, shifted);
        }
        self.a_inv.gemv_into(shifted, out);
        let coeff = dot(&self.v, out) / p.g;
        axpy(-coeff, &p.w, out);
    }

    fn singular_check(&self, p: &Perturbed) -> Result<(), P4InvError> {
        if !(p.g.abs() > SINGULAR_FACTOR) {
            return Err(P4InvError::Singular { factor: p.g });
        }
        Ok(())
    }

    /// `(A + u vᵀ) x + b`.
    pub fn forward(&self, x: &[f64]) -> DenseVector {
        assert_eq!(x.len(), self.dim(), "forward: input dimension");
        let mut out = DenseVector::zeros(self.dim());
        self.forward_row(x, &mut out);
        out
    }

    /// `(A + u vᵀ)⁻¹ (y − b)` via Sherman-Morrison.
    pub fn inverse(&self, y: &[f64]) -> Result<DenseVector, P4InvError> {
        assert_eq!(y.len(), self.dim(), "inverse: input dimension");
        let p = self.perturbed();
        self.singular_check(&p)?;
        let mut shifted = vec![0.0; self.dim()];
        let mut out = DenseVector::zeros(self.dim());
        self.inverse_row(&p, y, &mut shifted, &mut out);
        Ok(out)
    }

    /// Row-wise [`forward`](Self::forward) over a batch (one sample per row).
    pub fn forward_batch(&self, x: &DenseMatrix) -> DenseMatrix {
        assert_eq!(x.cols(), self.dim(), "forward_batch: input dimension");
        let mut out = DenseMatrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            self.forward_row(x.row(r), out.row_mut(r));
        }
        out
    }

    /// Row-wise [`inverse`](Self::inverse) over a batch.
    pub fn inverse_batch(&self, y: &DenseMatrix) -> Result<DenseMatrix, P4InvError> {
        assert_eq!(y.cols(), self.dim(), "inverse_batch: input dimension");
        let p = self.perturbed();
        self.singular_check(&p)?;
        let mut shifted = vec![0.0; self.dim()];
        let mut out = DenseMatrix::zeros(y.rows(), y.cols());
        for r in 0..y.rows() {
            self.inverse_row(&p, y.row(r), &mut shifted, out.row_mut(r));
        }
        Ok(out)
    }

    /// Accumulates parameter gradients of a forward pass and returns the
    /// input gradient.
    ///
    /// `grad_y` holds `∂L/∂y` per sample; `grad_logdet` is `∂L/∂ln|det|`
    /// summed over the batch (the log-determinant is the same for every
    /// sample).
    pub fn backward_batch(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        grad_logdet: f64,
    ) -> DenseMatrix {
        let n = self.dim();
        assert_eq!(x.cols(), n);
        assert_eq!((grad_y.rows(), grad_y.cols()), (x.rows(), n));
        let mut grad_x = DenseMatrix::zeros(x.rows(), n);
        for r in 0..x.rows() {
            let (xr, gr) = (x.row(r), grad_y.row(r));
            let vx = dot(&self.v, xr);
            let ug = dot(&self.u, gr);
            axpy(vx, gr, &mut self.grad_u);
            axpy(ug, xr, &mut self.grad_v);
            if self.config.bias {
                axpy(1.0, gr, &mut self.grad_bias);
            }
            let out = grad_x.row_mut(r);
            self.a.gemv_transpose_into(gr, out);
            axpy(ug, &self.v, out);
        }
        if grad_logdet != 0.0 {
            let p = self.perturbed();
            axpy(grad_logdet / p.g, &p.z, &mut self.grad_u);
            axpy(grad_logdet / p.g, &p.w, &mut self.grad_v);
        }
        grad_x
    }

    /// Single-sample [`backward_batch`](Self::backward_batch).
    pub fn backward(&mut self, x: &[f64], grad_y: &[f64], grad_logdet: f64) -> DenseVector {
        let n = self.dim();
        let xm = DenseMatrix::from_row_major(1, n, x.to_vec()).expect("input dimension");
        let gm = DenseMatrix::from_row_major(1, n, grad_y.to_vec()).expect("gradient dimension");
        DenseVector::from_vec(self.backward_batch(&xm, &gm, grad_logdet).into_vec())
    }

    /// Gradients of an inverse pass `x = (A + u vᵀ)⁻¹ (y − b)` whose
    /// log-determinant is `−ln|det(A + u vᵀ)|`. Returns `∂L/∂y`.
    ///
    /// `grad_logdet` is `∂L/∂(inverse log-determinant)`, summed over the batch.
    pub fn backward_inverse_batch(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        grad_logdet: f64,
    ) -> Result<DenseMatrix, P4InvError> {
        let n = self.dim();
        assert_eq!(y.cols(), n);
        assert_eq!((grad_x.rows(), grad_x.cols()), (y.rows(), n));
        let p = self.perturbed();
        self.singular_check(&p)?;
        // (A + u vᵀ)⁻ᵀ = A⁻ᵀ − A⁻ᵀ v uᵀ A⁻ᵀ / G, and A⁻ᵀ v = z.
        let mut grad_y = DenseMatrix::zeros(y.rows(), n);
        let mut shifted = vec![0.0; n];
        let mut x = vec![0.0; n];
        for r in 0..y.rows() {
            self.inverse_row(&p, y.row(r), &mut shifted, &mut x);
            let wt = grad_y.row_mut(r);
            self.a_inv.gemv_transpose_into(grad_x.row(r), wt);
            let coeff = dot(&self.u, wt) / p.g;
            axpy(-coeff, &p.z, wt);
            // dL/dM = −wt xᵀ
            let xv = dot(&x, &self.v);
            let wu = dot(wt, &self.u);
            axpy(-xv, wt, &mut self.grad_u);
            axpy(-wu, &x, &mut self.grad_v);
            if self.config.bias {
                axpy(-1.0, wt, &mut self.grad_bias);
            }
        }
        if grad_logdet != 0.0 {
            axpy(-grad_logdet / p.g, &p.z, &mut self.grad_u);
            axpy(-grad_logdet / p.g, &p.w, &mut self.grad_v);
        }
        Ok(grad_y)
    }

    fn log_abs_factor_for_penalty(&self, g: f64) -> f64 {
        match self.config.penalty_log_epsilon {
            Some(eps) => (g.abs() + eps).ln(),
            None => g.abs().ln(),
        }
    }

    /// `d penalty / d ln|G|` together with the penalty value.
    fn penalty_parts(&self, g: f64) -> (f64, f64) {
        let cp = self.config.penalty;
        if cp == 0.0 {
            return (0.0, 0.0);
        }
        let b = &self.config.bounds;
        let l0 = self.log_abs_factor_for_penalty(g);
        let l1 = l0 + self.det.log_abs;
        let relu = |x: f64| if x > 0.0 { x } else { 0.0 };
        let value = cp
            * (relu(l0 - b.c_max).powi(2)
                + relu(b.c_min - l0).powi(2)
                + relu(l1 - b.c_max).powi(2)
                + relu(b.c_min - l1).powi(2));
        let slope = cp
            * 2.0
            * (relu(l0 - b.c_max) - relu(b.c_min - l0) + relu(l1 - b.c_max) - relu(b.c_min - l1));
        (value, slope)
    }

    /// Log-determinant barrier:
    /// `C_p · Σ ReLU²` over the bounds on `ln|G|` and `ln|G · det A|`.
    pub fn penalty(&self) -> f64 {
        self.penalty_parts(self.factor()).0
    }

    /// Adds `scale · ∂penalty/∂(u, v)` to the gradients; returns the penalty.
    pub fn penalty_backward(&mut self, scale: f64) -> f64 {
        if self.config.penalty == 0.0 {
            return 0.0;
        }
        let p = self.perturbed();
        let (value, slope) = self.penalty_parts(p.g);
        if slope != 0.0 {
            // d ln(|G| + eps) / dG = sign(G) / (|G| + eps)
            let dlog_dg = match self.config.penalty_log_epsilon {
                Some(eps) => p.g.signum() / (p.g.abs() + eps),
                None => 1.0 / p.g,
            };
            let c = scale * slope * dlog_dg;
            axpy(c, &p.z, &mut self.grad_u);
            axpy(c, &p.w, &mut self.grad_v);
        }
        value
    }

    fn reset_perturbation(&mut self, rng: &mut dyn RngCore) {
        self.u.fill(0.0);
        self.draw_v(rng);
        self.generation += 1;
    }

    /// One merge attempt.
    ///
    /// Non-finite `u`/`v` reset the perturbation without touching `A`.
    /// Otherwise the merge is accepted when both log-magnitudes pass the gate,
    /// or unconditionally (as a forced merge) once `n_force` attempts have
    /// been made since the last acceptance, provided `G` is not numerically
    /// zero. Rejected merges keep the perturbation so optimization continues.
    pub fn attempt_merge(&mut self, rng: &mut dyn RngCore) -> MergeOutcome {
        if !(self.u.is_finite() && self.v.is_finite()) {
            self.reset_perturbation(rng);
            return MergeOutcome::tagged(MergeTag::SkippedNonFinite);
        }
        let g = self.factor();
        let log_g = g.abs().ln();
        let log_new = log_g + self.det.log_abs;
        let mut outcome = MergeOutcome {
            tag: MergeTag::SkippedIllConditioned,
            log_abs_factor: Some(log_g),
            log_abs_new_det: Some(log_new),
        };
        self.attempts_since_accept += 1;
        let sane = self.config.bounds.accepts(log_g, log_new);
        let forced = !sane && self.attempts_since_accept >= self.config.n_force;
        if !(sane || forced) || !(g.abs() > SINGULAR_FACTOR) {
            return outcome;
        }
        let a_inv = match sherman_morrison_update(&self.a_inv, &self.u, &self.v) {
            Ok(m) if m.is_finite() => m,
            _ => return outcome,
        };
        self.a_inv = a_inv;
        self.det = SignLogDet::from_value(g) * self.det;
        let (u, v) = (self.u.clone(), self.v.clone());
        self.a.add_outer(1.0, &u, &v);
        self.reset_perturbation(rng);
        self.merge_count += 1;
        self.attempts_since_accept = 0;
        if self.config.n_correct > 0 && self.merge_count.is_multiple_of(self.config.n_correct) {
            self.correct_inverse();
        }
        outcome.tag = if sane {
            MergeTag::Merged
        } else {
            MergeTag::ForcedMerge
        };
        outcome
    }

    /// One Newton-Schulz step on the stored inverse, skipped when the
    /// residual is outside the convergence region.
    pub fn correct_inverse(&mut self) -> bool {
        match newton_schulz_refine(&self.a, &self.a_inv, 1.0) {
            Ok((Some(x), residual)) => {
                self.last_correction_residual = Some(residual);
                self.a_inv = x;
                true
            }
            Ok((None, residual)) => {
                self.last_correction_residual = Some(residual);
                false
            }
            Err(_) => false,
        }
    }

    /// Resets the perturbation without merging.
    pub fn reset(&mut self, rng: &mut dyn RngCore) {
        self.reset_perturbation(rng);
    }

    /// The state obtained by merging the current perturbation unconditionally.
    ///
    /// The layer itself is not modified. Fails only if the perturbed matrix is
    /// numerically singular.
    pub fn snapshot(&self) -> Result<LayerState, P4InvError> {
        let n = self.dim();
        let (a, a_inv, det) = if self.u.iter().all(|x| *x == 0.0) {
            (self.a.clone(), self.a_inv.clone(), self.det)
        } else {
            let g = self.factor();
            if !(g.abs() > SINGULAR_FACTOR) {
                return Err(P4InvError::Singular { factor: g });
            }
            let a_inv = sherman_morrison_update(&self.a_inv, &self.u, &self.v)?;
            (self.effective_matrix(), a_inv, SignLogDet::from_value(g) * self.det)
        };
        Ok(LayerState {
            n,
            a: a.into_vec(),
            a_inv: a_inv.into_vec(),
            det_sign: det.sign,
            det_log_abs: det.log_abs,
            bias: self.bias.to_vec(),
        })
    }
}

impl Trainable for P4InvLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        f(ParamView {
            values: &mut self.u,
            grads: &mut self.grad_u,
            role: ParamRole::Perturbation,
            generation: self.generation,
        });
        f(ParamView {
            values: &mut self.v,
            grads: &mut self.grad_v,
            role: ParamRole::Perturbation,
            generation: self.generation,
        });
        if self.config.bias {
            f(ParamView {
                values: &mut self.bias,
                grads: &mut self.grad_bias,
                role: ParamRole::Direct,
                generation: 0,
            });
        }
    }
}

impl Perturbation for P4InvLayer {
    fn reset(&mut self, rng: &mut dyn RngCore) {
        P4InvLayer::reset(self, rng);
    }

    fn attempt_merge(&mut self, rng: &mut dyn RngCore) -> MergeOutcome {
        P4InvLayer::attempt_merge(self, rng)
    }

    fn frozen(&self) -> Vec<f64> {
        self.a.as_slice().to_vec()
    }

    fn effective(&self) -> Vec<f64> {
        self.effective_matrix().into_vec()
    }

    fn det_record(&self) -> Option<(i8, f64)> {
        let d = self.effective_det();
        Some((d.sign, d.log_abs))
    }
}

impl P4Model for P4InvLayer {
    fn visit_perturbations(&mut self, f: &mut dyn FnMut(&mut dyn Perturbation)) {
        f(self);
    }
}
