use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::p4core::{ParamRole, ParamView, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected network. Layer `l` maps `sizes[l]` to `sizes[l + 1]`
/// features and applies `activations[l]`.
///
/// Parameters live in one flat buffer: for each layer the row-major
/// `out × in` weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
    grads: Vec<f64>,
}

impl Mlp {
    /// Weights are drawn from `N(0, 1/fan_in)`, biases start at zero. With
    /// `zero_output` the last layer is all zeros, so the network outputs 0.
    pub fn new(
        sizes: &[usize],
        activations: &[Activation],
        zero_output: bool,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut mlp = Self::zeros(sizes, activations);
        let layers = activations.len();
        for l in 0..layers {
            if zero_output && l + 1 == layers {
                break;
            }
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let off = mlp.offset(l);
            for w in &mut mlp.params[off..off + fan_in * fan_out] {
                let z: f64 = rng.sample(StandardNormal);
                *w = std * z;
            }
        }
        mlp
    }

    pub fn zeros(sizes: &[usize], activations: &[Activation]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        assert_eq!(activations.len() + 1, sizes.len(), "one activation per layer");
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Self {
            sizes: sizes.to_vec(),
            activations: activations.to_vec(),
            params: vec![0.0; n],
            grads: vec![0.0; n],
        }
    }

    /// Rebuilds a network from its shape and flat parameters.
    pub fn from_params(
        sizes: &[usize],
        activations: &[Activation],
        params: Vec<f64>,
    ) -> Option<Self> {
        if sizes.len() < 2 || activations.len() + 1 != sizes.len() {
            return None;
        }
        let mut mlp = Self::zeros(sizes, activations);
        if params.len() != mlp.params.len() {
            return None;
        }
        mlp.params = params;
        Some(mlp)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Outputs of every layer, starting with the input itself.
    pub fn forward_cached(&self, x: &DenseMatrix) -> Vec<DenseMatrix> {
        assert_eq!(x.cols(), self.input_dim(), "mlp input dimension");
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.clone());
        for (l, act) in self.activations.iter().enumerate() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let h = acts.last().expect("input pushed");
            let mut out = DenseMatrix::zeros(x.rows(), fan_out);
            for r in 0..x.rows() {
                let hr = h.row(r);
                for (o, val) in out.row_mut(r).iter_mut().enumerate() {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    let z = row.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() + b[o];
                    *val = act.apply(z);
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &DenseMatrix) -> DenseMatrix {
        self.forward_cached(x).pop().expect("at least one layer")
    }

    /// Backpropagates `grad_out` through cached activations, accumulating
    /// parameter gradients; returns the input gradient.
    pub fn backward(&mut self, acts: &[DenseMatrix], grad_out: &DenseMatrix) -> DenseMatrix {
        let layers = self.activations.len();
        assert_eq!(acts.len(), layers + 1);
        let rows = grad_out.rows();
        let mut g = grad_out.clone();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let off = self.offset(l);
            let act = self.activations[l];
            // through the activation
            for (gi, &a) in g.as_mut_slice().iter_mut().zip(acts[l + 1].as_slice()) {
                *gi *= act.derivative_from_output(a);
            }
            let h = &acts[l];
            let mut gin = DenseMatrix::zeros(rows, fan_in);
            for r in 0..rows {
                let (gr, hr) = (g.row(r), h.row(r));
                let gin_r = gin.row_mut(r);
                for o in 0..fan_out {
                    let go = gr[o];
                    if go == 0.0 {
                        continue;
                    }
                    let wrow = &self.params[off + o * fan_in..off + (o + 1) * fan_in];
                    let grow = &mut self.grads[off + o * fan_in..off + (o + 1) * fan_in];
                    for i in 0..fan_in {
                        grow[i] += go * hr[i];
                        gin_r[i] += go * wrow[i];
                    }
                    self.grads[off + fan_in * fan_out + o] += go;
                }
            }
            g = gin;
        }
        g
    }
}

impl Trainable for Mlp {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamView<'_>)) {
        f(ParamView {
            values: &mut self.params,
            grads: &mut self.grads,
            role: ParamRole::Direct,
            generation: 0,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 5, 2], &[Activation::Relu, Activation::Identity], true, &mut rng);
        let x = DenseMatrix::from_fn(4, 3, |i, j| (i + j) as f64);
        assert!(mlp.forward(&x).as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(mlp.params().len(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let act = if seed % 2 == 0 { Activation::Tanh } else { Activation::Relu };
            let mut mlp = Mlp::new(&[3, 6, 6, 2], &[act, act, Activation::Identity], false, &mut rng);
            for b in mlp.params_mut().iter_mut() {
                *b += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
            let x = DenseMatrix::from_fn(4, 3, |_, _| rng.sample(StandardNormal));
            let c = DenseMatrix::from_fn(4, 2, |_, _| rng.sample(StandardNormal));
            let loss = |m: &Mlp, x: &DenseMatrix| -> f64 {
                m.forward(x).as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
            };
            let acts = mlp.forward_cached(&x);
            let gx = mlp.backward(&acts, &c);
            let h = 1e-5;
            let analytic = mlp.grads().to_vec();
            for k in 0..analytic.len() {
                let mut p = mlp.clone();
                p.params_mut()[k] += h;
                let lp = loss(&p, &x);
                p.params_mut()[k] -= 2.0 * h;
                let lm = loss(&p, &x);
                let fd = (lp - lm) / (2.0 * h);
                let err = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-6);
                assert!(err <= 1e-5, "param {k}: {} vs {fd}", analytic[k]);
            }
            for k in 0..x.as_slice().len() {
                let mut xp = x.clone();
                xp.as_mut_slice()[k] += h;
                let lp = loss(&mlp, &xp);
                xp.as_mut_slice()[k] -= 2.0 * h;
                let lm = loss(&mlp, &xp);
                let fd = (lp - lm) / (2.0 * h);
                let a = gx.as_slice()[k];
                assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) <= 1e-5);
            }
        }
    }
}
