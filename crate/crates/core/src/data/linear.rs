use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;

/// Which target matrix a linear fit should recover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetDescriptor {
    /// Symmetric, eigenvalues drawn from `U[0.5, 1.5]`.
    PositiveDefinite { n: usize },
    /// Haar-distributed rotation.
    SpecialOrthogonal { n: usize },
    /// `−I`; its determinant is negative for odd `n`.
    NegIdentity { n: usize },
    Identity { n: usize },
}

impl TargetDescriptor {
    pub fn dim(&self) -> usize {
        match *self {
            TargetDescriptor::PositiveDefinite { n }
            | TargetDescriptor::SpecialOrthogonal { n }
            | TargetDescriptor::NegIdentity { n }
            | TargetDescriptor::Identity { n } => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTarget {
    pub descriptor: TargetDescriptor,
    pub matrix: DenseMatrix,
}

impl LinearTarget {
    /// Deterministic in `(descriptor, seed)`.
    pub fn generate(descriptor: TargetDescriptor, seed: u64) -> Self {
        let matrix = match descriptor {
            TargetDescriptor::PositiveDefinite { n } => make_positive_definite(n, seed).matrix,
            TargetDescriptor::SpecialOrthogonal { n } => make_special_orthogonal(n, seed).matrix,
            TargetDescriptor::NegIdentity { n } => {
                let mut m = DenseMatrix::identity(n);
                m.as_mut_slice().iter_mut().for_each(|v| *v = -*v);
                m
            }
            TargetDescriptor::Identity { n } => DenseMatrix::identity(n),
        };
        Self { descriptor, matrix }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `x ~ N(0, I)` one sample per row, and `y = T x`.
    pub fn sample_batch(&self, batch: usize, rng: &mut dyn RngCore) -> (DenseMatrix, DenseMatrix) {
        let n = self.dim();
        let x = DenseMatrix::from_fn(batch, n, |_, _| rng.sample(StandardNormal));
        let mut y = DenseMatrix::zeros(batch, n);
        for r in 0..batch {
            self.matrix.gemv_into(x.row(r), y.row_mut(r));
        }
        (x, y)
    }
}

fn gaussian_matrix(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| rng.sample(StandardNormal))
}

/// Orthogonal factor of a Gaussian matrix, with column signs chosen so that
/// `R` has a positive diagonal; this makes `Q` Haar-distributed.
fn haar_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let qr = gaussian_matrix(n, rng).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix {
    DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// `Q diag(λ) Qᵀ` with Haar `Q` and `λᵢ ~ U[0.5, 1.5]`.
pub fn make_positive_definite(n: usize, seed: u64) -> LinearTarget {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eigenvalues: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    positive_definite_with(&eigenvalues, &mut rng)
}

/// `Q diag(λ) Qᵀ` with the given eigenvalues.
pub fn make_positive_definite_with_eigenvalues(eigenvalues: &[f64], seed: u64) -> LinearTarget {
    positive_definite_with(eigenvalues, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn positive_definite_with(eigenvalues: &[f64], rng: &mut ChaCha8Rng) -> LinearTarget {
    let n = eigenvalues.len();
    let q = haar_orthogonal(n, rng);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigenvalues));
    let t = &q * d * q.transpose();
    // Exact symmetry.
    let matrix = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (t[(i, j)] + t[(j, i)]));
    LinearTarget {
        descriptor: TargetDescriptor::PositiveDefinite { n },
        matrix,
    }
}

/// A Haar rotation: orthogonal with determinant `+1`.
pub fn make_special_orthogonal(n: usize, seed: u64) -> LinearTarget {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = haar_orthogonal(n, &mut rng);
    if n > 0 && q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    LinearTarget {
        descriptor: TargetDescriptor::SpecialOrthogonal { n },
        matrix: from_nalgebra(&q),
    }
}
