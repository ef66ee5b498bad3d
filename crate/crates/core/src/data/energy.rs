use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::flows::{Energy, LOG_2PI};
use crate::linalg::DenseMatrix;

/// Negative log-density of an isotropic Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub sigma: f64,
}

impl GaussianMixture {
    /// Returns `None` for empty, ragged or non-positive parameters. Weights
    /// are normalized.
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, sigma: f64) -> Option<Self> {
        let dim = means.first()?.len();
        let ok = dim > 0
            && means.iter().all(|m| m.len() == dim)
            && weights.len() == means.len()
            && weights.iter().all(|w| *w > 0.0 && w.is_finite())
            && sigma > 0.0
            && sigma.is_finite();
        if !ok {
            return None;
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Some(Self { means, weights, sigma })
    }

    /// Four equally weighted modes at `(±offset, ±offset, 0, …, 0)`.
    pub fn four_modes(dim: usize, offset: f64, sigma: f64) -> Self {
        assert!(dim >= 2);
        let means = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
            .iter()
            .map(|&(a, b)| {
                let mut m = vec![0.0; dim];
                m[0] = a * offset;
                m[1] = b * offset;
                m
            })
            .collect();
        Self::new(means, vec![1.0; 4], sigma).expect("valid parameters")
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn sample(&self, count: usize, rng: &mut dyn RngCore) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(count, self.dim());
        for r in 0..count {
            let mut u: f64 = rng.random();
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                if u < *w {
                    k = i;
                    break;
                }
                u -= w;
            }
            for (o, m) in out.row_mut(r).iter_mut().zip(&self.means[k]) {
                let z: f64 = rng.sample(StandardNormal);
                *o = m + self.sigma * z;
            }
        }
        out
    }

    /// Per-component `ln w_k + ln N(x; μ_k, σ²I)`.
    fn component_log_densities(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        let s2 = self.sigma * self.sigma;
        let norm = -0.5 * d * (LOG_2PI + s2.ln());
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() + norm - 0.5 * sq / s2
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.component_log_densities(x))
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

impl Energy for GaussianMixture {
    fn dim(&self) -> usize {
        GaussianMixture::dim(self)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        -self.log_density(x)
    }

    fn energy_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let logs = self.component_log_densities(x);
        let lse = log_sum_exp(&logs);
        let s2 = self.sigma * self.sigma;
        grad.fill(0.0);
        for (m, l) in self.means.iter().zip(&logs) {
            let resp = (l - lse).exp();
            for ((g, a), b) in grad.iter_mut().zip(x).zip(m) {
                *g += resp * (a - b) / s2;
            }
        }
        -lse
    }
}

/// `u(x) = a·x₁⁴ − b·x₁² + c·x₁ + (d/2)·Σ_{i>1} xᵢ²`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoubleWell {
    pub dim: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl DoubleWell {
    /// Wells near `x₁ = ±√3` separated by a barrier of height ≈ 9.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            a: 1.0,
            b: 6.0,
            c: 0.5,
            d: 1.0,
        }
    }
}

impl Energy for DoubleWell {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let x1 = x[0];
        let rest: f64 = x[1..].iter().map(|v| v * v).sum();
        self.a * x1.powi(4) - self.b * x1 * x1 + self.c * x1 + 0.5 * self.d * rest
    }

    fn energy_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let x1 = x[0];
        grad[0] = 4.0 * self.a * x1.powi(3) - 2.0 * self.b * x1 + self.c;
        for (g, v) in grad[1..].iter_mut().zip(&x[1..]) {
            *g = self.d * v;
        }
        self.energy(x)
    }
}

/// Stand-in target energies for energy-based flow training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticEnergy {
    GaussianMixture(GaussianMixture),
    DoubleWell(DoubleWell),
}

impl Energy for SyntheticEnergy {
    fn dim(&self) -> usize {
        match self {
            SyntheticEnergy::GaussianMixture(g) => Energy::dim(g),
            SyntheticEnergy::DoubleWell(d) => d.dim,
        }
    }

    fn energy(&self, x: &[f64]) -> f64 {
        match self {
            SyntheticEnergy::GaussianMixture(g) => g.energy(x),
            SyntheticEnergy::DoubleWell(d) => d.energy(x),
        }
    }

    fn energy_and_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            SyntheticEnergy::GaussianMixture(g) => g.energy_and_grad(x, grad),
            SyntheticEnergy::DoubleWell(d) => d.energy_and_grad(x, grad),
        }
    }
}
