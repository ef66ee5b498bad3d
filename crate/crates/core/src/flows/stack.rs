use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::{
    check_dim, AffineCoupling, BentLayer, Bijection, Energy, FlowError, LossWeights, Permutation,
};
use crate::linalg::DenseMatrix;
use crate::p4core::{P4Model, ParamView, Perturbation, Trainable};
use crate::p4inv::P4InvLayer;

/// `ln(2π)`
pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
pub enum FlowLayer {
    P4Inv(P4InvLayer),
    Bent(BentLayer),
    Coupling(AffineCoupling),
    Permutation(Permutation),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $body:expr) => {
        match $self {
            FlowLayer::P4Inv($l) => $body,
            FlowLayer::Bent($l) => $body,
            FlowLayer::Coupling($l) => $body,
            FlowLayer::Permutation($l) => $body,
        }
    };
}

impl From<P4InvLayer> for FlowLayer {
    fn from(l: P4InvLayer) -> Self {
        FlowLayer::P4Inv(l)
    }
}

impl From<BentLayer> for FlowLayer {
    fn from(l: BentLayer) -> Self {
        FlowLayer::Bent(l)
    }
}

impl From<AffineCoupling> for FlowLayer {
    fn from(l: AffineCoupling) -> Self {
        FlowLayer::Coupling(l)
    }
}

impl From<Permutation> for FlowLayer {
    fn from(l: Permutation) -> Self {
        FlowLayer::Permutation(l)
    }
}

impl Trainable for FlowLayer {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        dispatch!(self, l => l.visit_params(f))
    }
}

impl P4Model for FlowLayer {
    fn visit_perturbations(&mut self, f: &mut dyn FnMut(&mut dyn Perturbation)) {
        dispatch!(self, l => l.visit_perturbations(f))
    }
}

impl Bijection for FlowLayer {
    fn dim(&self) -> usize {
        dispatch!(self, l => Bijection::dim(l))
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        dispatch!(self, l => Bijection::forward(l, x))
    }

    fn inverse(&self, y: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        dispatch!(self, l => Bijection::inverse(l, y))
    }

    fn backward(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        dispatch!(self, l => Bijection::backward(l, x, grad_y, grad_logdet))
    }

    fn backward_inverse(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        dispatch!(self, l => Bijection::backward_inverse(l, y, grad_x, grad_logdet))
    }

    fn penalty(&self) -> f64 {
        dispatch!(self, l => Bijection::penalty(l))
    }

    fn penalty_backward(&mut self, scale: f64) -> f64 {
        dispatch!(self, l => Bijection::penalty_backward(l, scale))
    }
}

/// A composition of bijections with a standard-normal base distribution.
///
/// `forward` maps latent samples to data (`h_i = L_i(h_{i−1})`, `z = h_0`);
/// densities are evaluated by running `inverse` from data to latent.
#[derive(Debug, Clone)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<FlowLayer>,
}

/// Inputs seen by each layer during one pass, plus the output and summed
/// log-determinant.
struct Trace {
    inputs: Vec<DenseMatrix>,
    output: DenseMatrix,
    logdet: Vec<f64>,
}

impl FlowStack {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: impl Into<FlowLayer>) -> Result<(), FlowError> {
        let layer = layer.into();
        if layer.dim() != self.dim {
            return Err(FlowError::Dimension {
                expected: self.dim,
                found: layer.dim(),
            });
        }
        self.layers.push(layer);
        Ok(())
    }

    pub fn append(&mut self, other: FlowStack) -> Result<(), FlowError> {
        if other.dim != self.dim {
            return Err(FlowError::Dimension {
                expected: self.dim,
                found: other.dim,
            });
        }
        self.layers.extend(other.layers);
        Ok(())
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// The P⁴Inv layers in order.
    pub fn p4inv_layers(&self) -> impl Iterator<Item = &P4InvLayer> {
        self.layers.iter().filter_map(|l| match l {
            FlowLayer::P4Inv(p) => Some(p),
            _ => None,
        })
    }

    fn trace_forward(&self, z: &DenseMatrix) -> Result<Trace, FlowError> {
        check_dim(z, self.dim)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = z.clone();
        let mut logdet = vec![0.0; z.rows()];
        for layer in &self.layers {
            let (next, ld) = layer.forward(&h)?;
            logdet.iter_mut().zip(&ld).for_each(|(a, b)| *a += b);
            inputs.push(std::mem::replace(&mut h, next));
        }
        Ok(Trace {
            inputs,
            output: h,
            logdet,
        })
    }

    /// `inputs[i]` is what the inverse of layer `i` received.
    fn trace_inverse(&self, x: &DenseMatrix) -> Result<Trace, FlowError> {
        check_dim(x, self.dim)?;
        let mut inputs = vec![DenseMatrix::zeros(0, 0); self.layers.len()];
        let mut h = x.clone();
        let mut logdet = vec![0.0; x.rows()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = layer.inverse(&h)?;
            logdet.iter_mut().zip(&ld).for_each(|(a, b)| *a += b);
            inputs[i] = std::mem::replace(&mut h, prev);
        }
        Ok(Trace {
            inputs,
            output: h,
            logdet,
        })
    }

    /// Standard-normal log-density of each row.
    pub fn base_log_density(&self, z: &DenseMatrix) -> Vec<f64> {
        let c = 0.5 * self.dim as f64 * LOG_2PI;
        (0..z.rows())
            .map(|r| -0.5 * z.row(r).iter().map(|v| v * v).sum::<f64>() - c)
            .collect()
    }

    /// `ln q(x)` per row.
    pub fn log_density(&self, x: &DenseMatrix) -> Result<Vec<f64>, FlowError> {
        let t = self.trace_inverse(x)?;
        let base = self.base_log_density(&t.output);
        Ok(base.iter().zip(&t.logdet).map(|(a, b)| a + b).collect())
    }

    /// Draws `count` samples by pushing standard-normal noise forward.
    pub fn sample(&self, count: usize, rng: &mut dyn RngCore) -> Result<DenseMatrix, FlowError> {
        Ok(self.sample_with_log_density(count, rng)?.0)
    }

    /// Samples together with their model log-density
    /// `ln q(x) = ln p(z) − ln|det ∂x/∂z|`.
    pub fn sample_with_log_density(
        &self,
        count: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        let z = DenseMatrix::from_fn(count, self.dim, |_, _| rng.sample(StandardNormal));
        let base = self.base_log_density(&z);
        let (x, ld) = self.forward(&z)?;
        Ok((x, base.iter().zip(&ld).map(|(a, b)| a - b).collect()))
    }

    /// Mean negative log-likelihood of a batch, without gradients or
    /// penalties.
    pub fn mean_nll(&self, x: &DenseMatrix) -> Result<f64, FlowError> {
        let lp = self.log_density(x)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// Sum of layer penalties.
    pub fn total_penalty(&self) -> f64 {
        self.layers.iter().map(|l| l.penalty()).sum()
    }

    fn penalty_terms(&mut self, scale: f64) -> f64 {
        self.layers.iter_mut().map(|l| l.penalty_backward(scale)).sum()
    }

    /// Likelihood term `scale · mean(½‖z‖² + (n/2)ln 2π − ln R_xz)`,
    /// accumulating its gradient.
    fn nll_terms(&mut self, x: &DenseMatrix, scale: f64) -> Result<f64, FlowError> {
        assert!(x.rows() > 0, "empty batch");
        let t = self.trace_inverse(x)?;
        let b = x.rows() as f64;
        let nll: f64 = -self
            .base_log_density(&t.output)
            .iter()
            .zip(&t.logdet)
            .map(|(a, c)| a + c)
            .sum::<f64>()
            / b;
        let mut g = t.output.clone();
        g.as_mut_slice().iter_mut().for_each(|v| *v *= scale / b);
        let gl = vec![-scale / b; x.rows()];
        for (layer, input) in self.layers.iter_mut().zip(&t.inputs) {
            g = layer.backward_inverse(input, &g, &gl)?;
        }
        Ok(scale * nll)
    }

    /// Energy term `scale · mean(u(F_zx(z)) − ln R_zx(z))`, accumulating its
    /// gradient.
    fn energy_terms(
        &mut self,
        z: &DenseMatrix,
        energy: &dyn Energy,
        scale: f64,
    ) -> Result<f64, FlowError> {
        assert!(z.rows() > 0, "empty batch");
        assert_eq!(energy.dim(), self.dim, "energy dimension");
        let t = self.trace_forward(z)?;
        let b = z.rows() as f64;
        let mut g = DenseMatrix::zeros(z.rows(), self.dim);
        let mut total = 0.0;
        for r in 0..z.rows() {
            let u = energy.energy_and_grad(t.output.row(r), g.row_mut(r));
            total += u - t.logdet[r];
        }
        g.as_mut_slice().iter_mut().for_each(|v| *v *= scale / b);
        let gl = vec![-scale / b; z.rows()];
        for (layer, input) in self.layers.iter_mut().zip(&t.inputs).rev() {
            g = layer.backward(input, &g, &gl)?;
        }
        Ok(scale * total / b)
    }

    /// `J_l` on a data batch plus layer penalties; gradients are accumulated
    /// into the parameter views.
    pub fn nll_loss(&mut self, x: &DenseMatrix) -> Result<f64, FlowError> {
        Ok(self.nll_terms(x, 1.0)? + self.penalty_terms(1.0))
    }

    /// `J_e` on a latent batch plus layer penalties, with gradients.
    pub fn energy_loss(&mut self, z: &DenseMatrix, energy: &dyn Energy) -> Result<f64, FlowError> {
        Ok(self.energy_terms(z, energy, 1.0)? + self.penalty_terms(1.0))
    }

    /// `w_l·J_l + w_e·J_e` plus layer penalties, with gradients. Terms with
    /// zero weight are not evaluated.
    pub fn mixed_loss(
        &mut self,
        weights: LossWeights,
        x: &DenseMatrix,
        z: &DenseMatrix,
        energy: &dyn Energy,
    ) -> Result<f64, FlowError> {
        let mut loss = self.penalty_terms(1.0);
        if weights.likelihood != 0.0 {
            loss += self.nll_terms(x, weights.likelihood)?;
        }
        if weights.energy != 0.0 {
            loss += self.energy_terms(z, energy, weights.energy)?;
        }
        Ok(loss)
    }

    /// Mean of `u(F_zx(z)) − ln R_zx(z)` without gradients.
    pub fn mean_energy_loss(&self, z: &DenseMatrix, energy: &dyn Energy) -> Result<f64, FlowError> {
        let (x, ld) = self.forward(z)?;
        let total: f64 = (0..z.rows()).map(|r| energy.energy(x.row(r)) - ld[r]).sum();
        Ok(total / z.rows() as f64)
    }
}

impl Trainable for FlowStack {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        for l in &mut self.layers {
            l.visit_params(f);
        }
    }
}

impl P4Model for FlowStack {
    fn visit_perturbations(&mut self, f: &mut dyn FnMut(&mut dyn Perturbation)) {
        for l in &mut self.layers {
            l.visit_perturbations(f);
        }
    }
}

impl Bijection for FlowStack {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        let t = self.trace_forward(x)?;
        Ok((t.output, t.logdet))
    }

    fn inverse(&self, y: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        let t = self.trace_inverse(y)?;
        Ok((t.output, t.logdet))
    }

    fn backward(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        let t = self.trace_forward(x)?;
        let mut g = grad_y.clone();
        for (layer, input) in self.layers.iter_mut().zip(&t.inputs).rev() {
            g = layer.backward(input, &g, grad_logdet)?;
        }
        Ok(g)
    }

    fn backward_inverse(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        let t = self.trace_inverse(y)?;
        let mut g = grad_x.clone();
        for (layer, input) in self.layers.iter_mut().zip(&t.inputs) {
            g = layer.backward_inverse(input, &g, grad_logdet)?;
        }
        Ok(g)
    }

    fn penalty(&self) -> f64 {
        self.total_penalty()
    }

    fn penalty_backward(&mut self, scale: f64) -> f64 {
        self.penalty_terms(scale)
    }
}
