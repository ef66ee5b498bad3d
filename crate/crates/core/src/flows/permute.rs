use super::{check_dim, Bijection, FlowError};
use crate::linalg::DenseMatrix;
use crate::p4core::{P4Model, ParamView, Perturbation, Trainable};

/// Fixed coordinate permutation: `y[i] = x[perm[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    perm: Vec<usize>,
}

impl Permutation {
    /// Returns `None` unless `perm` is a permutation of `0..perm.len()`.
    pub fn new(perm: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return None;
            }
        }
        Some(Self { perm })
    }

    /// Exchanges the first `split` coordinates with the rest:
    /// `(x₁, x₂) ↦ (x₂, x₁)`.
    pub fn swap(dim: usize, split: usize) -> Self {
        assert!(split <= dim);
        Self {
            perm: (split..dim).chain(0..split).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.perm
    }

    fn gather(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |r, i| x[(r, self.perm[i])])
    }

    fn scatter(&self, y: &DenseMatrix) -> DenseMatrix {
        let mut x = DenseMatrix::zeros(y.rows(), y.cols());
        for r in 0..y.rows() {
            for (i, &p) in self.perm.iter().enumerate() {
                x[(r, p)] = y[(r, i)];
            }
        }
        x
    }
}

impl Trainable for Permutation {
    fn visit_params(&mut self, _f: &mut dyn FnMut(ParamView<'_>)) {}
}

impl P4Model for Permutation {
    fn visit_perturbations(&mut self, _f: &mut dyn FnMut(&mut dyn Perturbation)) {}
}

impl Bijection for Permutation {
    fn dim(&self) -> usize {
        self.perm.len()
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(x, self.dim())?;
        Ok((self.gather(x), vec![0.0; x.rows()]))
    }

    fn inverse(&self, y: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(y, self.dim())?;
        Ok((self.scatter(y), vec![0.0; y.rows()]))
    }

    fn backward(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        _grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(x, self.dim())?;
        Ok(self.scatter(grad_y))
    }

    fn backward_inverse(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        _grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(y, self.dim())?;
        Ok(self.gather(grad_x))
    }
}
