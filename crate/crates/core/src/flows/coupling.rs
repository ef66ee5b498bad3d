use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_dim, Activation, Bijection, FlowError, Mlp};
use crate::linalg::DenseMatrix;
use crate::p4core::{P4Model, ParamView, Perturbation, Trainable};

/// Shape of an affine coupling layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSpec {
    pub dim: usize,
    /// Size of the first block; the second block has `dim − split` entries.
    pub split: usize,
    /// When true the first block conditions and the second is transformed.
    pub condition_on_first: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Squash the raw scale output with `tanh`.
    pub scale_tanh: bool,
}

impl CouplingSpec {
    pub fn new(dim: usize, condition_on_first: bool, hidden: &[usize], activation: Activation) -> Self {
        Self {
            dim,
            split: dim / 2,
            condition_on_first,
            hidden: hidden.to_vec(),
            activation,
            scale_tanh: true,
        }
    }

    fn passive(&self) -> std::ops::Range<usize> {
        if self.condition_on_first {
            0..self.split
        } else {
            self.split..self.dim
        }
    }

    fn active(&self) -> std::ops::Range<usize> {
        if self.condition_on_first {
            self.split..self.dim
        } else {
            0..self.split
        }
    }

    fn net_shape(&self) -> (Vec<usize>, Vec<Activation>) {
        let mut sizes = vec![self.passive().len()];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.active().len());
        let mut acts = vec![self.activation; self.hidden.len()];
        acts.push(Activation::Identity);
        (sizes, acts)
    }
}

/// RealNVP coupling: `y_a = x_a ⊙ exp(s(x_p)) + t(x_p)`, `y_p = x_p`.
///
/// The output layers of both conditioners start at zero, so a fresh layer is
/// the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCoupling {
    spec: CouplingSpec,
    t_net: Mlp,
    s_net: Mlp,
}

struct Conditioned {
    t_acts: Vec<DenseMatrix>,
    s_acts: Vec<DenseMatrix>,
    /// Log-scale after the optional squashing, one row per sample.
    s: DenseMatrix,
}

impl AffineCoupling {
    pub fn new(spec: CouplingSpec, rng: &mut dyn RngCore) -> Self {
        assert!(spec.split >= 1 && spec.split < spec.dim, "both blocks must be non-empty");
        let (sizes, acts) = spec.net_shape();
        let t_net = Mlp::new(&sizes, &acts, true, rng);
        let s_net = Mlp::new(&sizes, &acts, true, rng);
        Self { spec, t_net, s_net }
    }

    pub fn from_parts(spec: CouplingSpec, t_params: Vec<f64>, s_params: Vec<f64>) -> Option<Self> {
        if !(spec.split >= 1 && spec.split < spec.dim) {
            return None;
        }
        let (sizes, acts) = spec.net_shape();
        let t_net = Mlp::from_params(&sizes, &acts, t_params)?;
        let s_net = Mlp::from_params(&sizes, &acts, s_params)?;
        Some(Self { spec, t_net, s_net })
    }

    pub fn spec(&self) -> &CouplingSpec {
        &self.spec
    }

    pub fn t_net(&self) -> &Mlp {
        &self.t_net
    }

    pub fn s_net(&self) -> &Mlp {
        &self.s_net
    }

    pub fn t_net_mut(&mut self) -> &mut Mlp {
        &mut self.t_net
    }

    pub fn s_net_mut(&mut self) -> &mut Mlp {
        &mut self.s_net
    }

    fn passive_block(&self, x: &DenseMatrix) -> DenseMatrix {
        let p = self.spec.passive();
        DenseMatrix::from_fn(x.rows(), p.len(), |r, j| x[(r, p.start + j)])
    }

    fn condition(&self, x: &DenseMatrix) -> Conditioned {
        let xp = self.passive_block(x);
        let t_acts = self.t_net.forward_cached(&xp);
        let s_acts = self.s_net.forward_cached(&xp);
        let mut s = s_acts.last().expect("output").clone();
        if self.spec.scale_tanh {
            s.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        }
        Conditioned { t_acts, s_acts, s }
    }

    /// `direction` is +1 for the forward map and −1 for the inverse.
    fn apply(&self, x: &DenseMatrix, direction: f64) -> (DenseMatrix, Vec<f64>) {
        let c = self.condition(x);
        let t = c.t_acts.last().expect("output");
        let a = self.spec.active();
        let mut y = x.clone();
        let mut ld = vec![0.0; x.rows()];
        for r in 0..x.rows() {
            for (j, col) in a.clone().enumerate() {
                let s = c.s[(r, j)];
                let v = &mut y[(r, col)];
                *v = if direction > 0.0 {
                    *v * s.exp() + t[(r, j)]
                } else {
                    (*v - t[(r, j)]) * (-s).exp()
                };
                ld[r] += direction * s;
            }
        }
        (y, ld)
    }

    /// Pushes gradients w.r.t. `t` and squashed `s` through both
    /// conditioners and adds the passive-block gradient to `grad_in`.
    fn backprop_conditioners(
        &mut self,
        c: &Conditioned,
        grad_t: &DenseMatrix,
        mut grad_s: DenseMatrix,
        grad_in: &mut DenseMatrix,
    ) {
        if self.spec.scale_tanh {
            for (g, s) in grad_s.as_mut_slice().iter_mut().zip(c.s.as_slice()) {
                *g *= 1.0 - s * s;
            }
        }
        let gt = self.t_net.backward(&c.t_acts, grad_t);
        let gs = self.s_net.backward(&c.s_acts, &grad_s);
        let p = self.spec.passive();
        for r in 0..grad_in.rows() {
            for (j, col) in p.clone().enumerate() {
                grad_in[(r, col)] += gt[(r, j)] + gs[(r, j)];
            }
        }
    }
}

impl Trainable for AffineCoupling {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        self.t_net.visit_params(f);
        self.s_net.visit_params(f);
    }
}

impl P4Model for AffineCoupling {
    fn visit_perturbations(&mut self, _f: &mut dyn FnMut(&mut dyn Perturbation)) {}
}

impl Bijection for AffineCoupling {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(x, self.spec.dim)?;
        Ok(self.apply(x, 1.0))
    }

    fn inverse(&self, y: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(y, self.spec.dim)?;
        Ok(self.apply(y, -1.0))
    }

    fn backward(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(x, self.spec.dim)?;
        let c = self.condition(x);
        let a = self.spec.active();
        let rows = x.rows();
        let mut grad_x = grad_y.clone();
        let mut grad_t = DenseMatrix::zeros(rows, a.len());
        let mut grad_s = DenseMatrix::zeros(rows, a.len());
        for r in 0..rows {
            for (j, col) in a.clone().enumerate() {
                let e = c.s[(r, j)].exp();
                let g = grad_y[(r, col)];
                grad_x[(r, col)] = g * e;
                grad_t[(r, j)] = g;
                grad_s[(r, j)] = g * x[(r, col)] * e + grad_logdet[r];
            }
        }
        self.backprop_conditioners(&c, &grad_t, grad_s, &mut grad_x);
        Ok(grad_x)
    }

    fn backward_inverse(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(y, self.spec.dim)?;
        let c = self.condition(y);
        let t = c.t_acts.last().expect("output").clone();
        let a = self.spec.active();
        let rows = y.rows();
        let mut grad_y = grad_x.clone();
        let mut grad_t = DenseMatrix::zeros(rows, a.len());
        let mut grad_s = DenseMatrix::zeros(rows, a.len());
        for r in 0..rows {
            for (j, col) in a.clone().enumerate() {
                let e = (-c.s[(r, j)]).exp();
                let g = grad_x[(r, col)];
                let x_act = (y[(r, col)] - t[(r, j)]) * e;
                grad_y[(r, col)] = g * e;
                grad_t[(r, j)] = -g * e;
                grad_s[(r, j)] = -g * x_act - grad_logdet[r];
            }
        }
        self.backprop_conditioners(&c, &grad_t, grad_s, &mut grad_y);
        Ok(grad_y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_coupling(seed: u64, dim: usize, first: bool, act: Activation) -> AffineCoupling {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = AffineCoupling::new(CouplingSpec::new(dim, first, &[6, 6], act), &mut rng);
        for p in c.t_net_mut().params_mut() {
            *p += 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        for p in c.s_net_mut().params_mut() {
            *p += 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        c
    }

    #[test]
    fn fresh_coupling_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = AffineCoupling::new(CouplingSpec::new(4, true, &[8], Activation::Relu), &mut rng);
        let x = DenseMatrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let (y, ld) = c.forward(&x).unwrap();
        assert_eq!(y, x);
        assert_eq!(ld, [0.0; 3]);
    }

    #[test]
    fn additive_shear() {
        // s ≡ 0 and t(x₁) = x₁ via a single identity layer.
        let spec = CouplingSpec {
            dim: 2,
            split: 1,
            condition_on_first: true,
            hidden: vec![],
            activation: Activation::Identity,
            scale_tanh: true,
        };
        let c = AffineCoupling::from_parts(spec, vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let x = DenseMatrix::from_row_major(1, 2, vec![1.0, 2.0]).unwrap();
        let (y, ld) = c.forward(&x).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 3.0]);
        assert_eq!(ld, [0.0]);
    }

    #[test]
    fn roundtrip_and_passive_block() {
        for seed in 0..100 {
            let first = seed % 2 == 0;
            let c = random_coupling(seed, 5, first, Activation::Tanh);
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = DenseMatrix::from_fn(4, 5, |_, _| rng.sample(StandardNormal));
            let (y, ld) = c.forward(&x).unwrap();
            let (back, ld_inv) = c.inverse(&y).unwrap();
            assert!(back.max_abs_diff(&x) <= 1e-10);
            for (a, b) in ld.iter().zip(&ld_inv) {
                assert!((a + b).abs() <= 1e-12);
            }
            for r in 0..4 {
                for col in c.spec.passive() {
                    assert_eq!(y[(r, col)].to_bits(), x[(r, col)].to_bits());
                }
            }
        }
    }

    fn check_grads(c: &mut AffineCoupling, input: &DenseMatrix, inverse: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = DenseMatrix::from_fn(input.rows(), input.cols(), |_, _| rng.sample(StandardNormal));
        let lam: Vec<f64> = (0..input.rows()).map(|_| rng.sample(StandardNormal)).collect();
        let loss = |c: &AffineCoupling, x: &DenseMatrix| -> f64 {
            let (y, ld) = if inverse { c.inverse(x) } else { c.forward(x) }.unwrap();
            let data: f64 = y.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
            data + ld.iter().zip(&lam).map(|(a, b)| a * b).sum::<f64>()
        };
        c.zero_grads();
        let gin = if inverse {
            c.backward_inverse(input, &w, &lam).unwrap()
        } else {
            c.backward(input, &w, &lam).unwrap()
        };
        let mut analytic = Vec::new();
        c.visit_params(&mut |p| analytic.extend_from_slice(p.grads));
        let h = 1e-5;
        // Relative error with an absolute floor; central differences carry ~1e-10 of
        // rounding noise, which swamps components near zero.
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
        let mut k = 0;
        for net in 0..2 {
            let len = if net == 0 { c.t_net.params().len() } else { c.s_net.params().len() };
            for i in 0..len {
                let mut p = c.clone();
                let buf = if net == 0 { p.t_net_mut() } else { p.s_net_mut() };
                buf.params_mut()[i] += h;
                let lp = loss(&p, input);
                let buf = if net == 0 { p.t_net_mut() } else { p.s_net_mut() };
                buf.params_mut()[i] -= 2.0 * h;
                let lm = loss(&p, input);
                let fd = (lp - lm) / (2.0 * h);
                assert!(rel(fd, analytic[k]) <= 1e-5, "param {k}: {} vs {fd}", analytic[k]);
                k += 1;
            }
        }
        for i in 0..input.as_slice().len() {
            let mut xp = input.clone();
            xp.as_mut_slice()[i] += h;
            let lp = loss(c, &xp);
            xp.as_mut_slice()[i] -= 2.0 * h;
            let lm = loss(c, &xp);
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel(fd, gin.as_slice()[i]) <= 1e-5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut c = random_coupling(seed, 4, seed % 2 == 0, Activation::Tanh);
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let x = DenseMatrix::from_fn(3, 4, |_, _| rng.sample(StandardNormal));
            check_grads(&mut c, &x, false);
            check_grads(&mut c, &x, true);
        }
    }
}
