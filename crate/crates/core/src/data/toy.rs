use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;

/// Two-dimensional benchmark densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy2D {
    /// Eight isotropic Gaussians (std 0.5) on a circle of radius 4.
    EightGaussians,
    Checkerboard,
    TwoSpirals,
    TwoMoons,
    Rings,
}

impl Toy2D {
    pub const ALL: [Toy2D; 5] = [
        Toy2D::EightGaussians,
        Toy2D::Checkerboard,
        Toy2D::TwoSpirals,
        Toy2D::TwoMoons,
        Toy2D::Rings,
    ];

    /// Mode centers of the eight-Gaussian mixture.
    pub fn eight_gaussian_centers() -> [[f64; 2]; 8] {
        let s = 4.0;
        let d = s * FRAC_1_SQRT_2;
        [
            [s, 0.0],
            [-s, 0.0],
            [0.0, s],
            [0.0, -s],
            [d, d],
            [d, -d],
            [-d, d],
            [-d, -d],
        ]
    }

    pub fn sample(&self, count: usize, rng: &mut dyn RngCore) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(count, 2);
        for r in 0..count {
            let p = self.sample_one(rng);
            out.row_mut(r).copy_from_slice(&p);
        }
        out
    }

    /// Same as [`sample`](Self::sample) with a fresh generator seeded by `seed`.
    pub fn sample_seeded(&self, count: usize, seed: u64) -> DenseMatrix {
        self.sample(count, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn sample_one(&self, rng: &mut dyn RngCore) -> [f64; 2] {
        match self {
            Toy2D::EightGaussians => {
                let c = Self::eight_gaussian_centers()[rng.random_range(0..8usize)];
                [c[0] + 0.5 * normal(rng), c[1] + 0.5 * normal(rng)]
            }
            Toy2D::Checkerboard => {
                let x1: f64 = rng.random_range(-2.0..2.0);
                let x2: f64 = rng.random::<f64>() - 2.0 * f64::from(rng.random_range(0..2u8));
                let shift = x1.floor().rem_euclid(2.0);
                [2.0 * x1, 2.0 * (x2 + shift)]
            }
            Toy2D::TwoSpirals => {
                let t = rng.random::<f64>().sqrt() * 540.0 * (2.0 * PI) / 360.0;
                let mut x = -t.cos() * t + 0.5 * rng.random::<f64>();
                let mut y = t.sin() * t + 0.5 * rng.random::<f64>();
                if rng.random::<bool>() {
                    x = -x;
                    y = -y;
                }
                [x / 3.0 + 0.1 * normal(rng), y / 3.0 + 0.1 * normal(rng)]
            }
            Toy2D::TwoMoons => {
                let t = rng.random_range(0.0..PI);
                let (x, y) = if rng.random::<bool>() {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                [
                    2.0 * (x + 0.1 * normal(rng)) - 1.0,
                    2.0 * (y + 0.1 * normal(rng)) - 0.2,
                ]
            }
            Toy2D::Rings => {
                let radius = 0.75 * f64::from(1 + rng.random_range(0..4u8));
                let a = rng.random_range(0.0..2.0 * PI);
                [
                    radius * a.cos() + 0.08 * normal(rng),
                    radius * a.sin() + 0.08 * normal(rng),
                ]
            }
        }
    }
}

fn normal(rng: &mut dyn RngCore) -> f64 {
    rng.sample(StandardNormal)
}

/// Assigns each row to its nearest center and returns the counts.
pub fn assign_to_modes(samples: &DenseMatrix, centers: &[[f64; 2]]) -> Vec<usize> {
    let mut counts = vec![0; centers.len()];
    for r in 0..samples.rows() {
        let p = samples.row(r);
        let best = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k);
        if let Some(k) = best {
            counts[k] += 1;
        }
    }
    counts
}
