use super::{check_dim, Bijection, FlowError};
use crate::linalg::DenseMatrix;
use crate::p4core::{P4Model, ParamView, Perturbation, Trainable};

/// `B(x) = (√(x²+1) − 1)/2 + x`
pub fn bent(x: f64) -> f64 {
    (x.hypot(1.0) - 1.0) / 2.0 + x
}

/// `B'(x) = 1 + x / (2√(x²+1))`, always in `(1/2, 3/2)`.
pub fn bent_derivative(x: f64) -> f64 {
    1.0 + x / (2.0 * x.hypot(1.0))
}

fn bent_second_derivative(x: f64) -> f64 {
    let r = x.hypot(1.0);
    1.0 / (2.0 * r * r * r)
}

/// `B(x)` and `ln B'(x)`.
pub fn bent_forward(x: f64) -> (f64, f64) {
    (bent(x), bent_derivative(x).ln())
}

/// `B⁻¹(y)` and `−ln B'(B⁻¹(y))`.
///
/// Solving `B(x) = y` for `x` gives `3x² − 4cx + c² − 1 = 0` with
/// `c = 2y + 1`; the increasing branch is `x = (2c − √(c² + 3)) / 3`.
pub fn bent_inverse(y: f64) -> (f64, f64) {
    let c = 2.0 * y + 1.0;
    let s = c.hypot(3f64.sqrt());
    // Rationalized form for c ≥ 0, where 2c − s cancels near y = 0.
    let x = if c >= 0.0 {
        4.0 * y * (y + 1.0) / (2.0 * c + s)
    } else {
        (2.0 * c - s) / 3.0
    };
    (x, -bent_derivative(x).ln())
}

/// Elementwise Bent identity, or its inverse when `inverted`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BentLayer {
    dim: usize,
    inverted: bool,
}

impl BentLayer {
    pub fn new(dim: usize) -> Self {
        Self { dim, inverted: false }
    }

    pub fn inverted(dim: usize) -> Self {
        Self { dim, inverted: true }
    }

    pub fn is_inverted(&self) -> bool {
        self.inverted
    }

    /// Applies `B` (`up`) or `B⁻¹` elementwise.
    fn map(x: &DenseMatrix, up: bool) -> (DenseMatrix, Vec<f64>) {
        let mut y = x.clone();
        let mut ld = vec![0.0; x.rows()];
        for (r, l) in ld.iter_mut().enumerate() {
            for v in y.row_mut(r) {
                let (out, d) = if up { bent_forward(*v) } else { bent_inverse(*v) };
                *v = out;
                *l += d;
            }
        }
        (y, ld)
    }

    /// Gradient through `B` (`up`) or `B⁻¹` applied at `x`.
    fn map_backward(x: &DenseMatrix, g: &DenseMatrix, gl: &[f64], up: bool) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            for ((o, &xi), &gi) in out.row_mut(r).iter_mut().zip(x.row(r)).zip(g.row(r)) {
                *o = if up {
                    // y = B(x), ld = ln B'(x)
                    let d = bent_derivative(xi);
                    gi * d + gl[r] * bent_second_derivative(xi) / d
                } else {
                    // y = B⁻¹(x), ld = −ln B'(y), dy/dx = 1/B'(y)
                    let y = bent_inverse(xi).0;
                    let d = bent_derivative(y);
                    (gi - gl[r] * bent_second_derivative(y) / d) / d
                };
            }
        }
        out
    }
}

impl Trainable for BentLayer {
    fn visit_params(&mut self, _f: &mut dyn FnMut(ParamView<'_>)) {}
}

impl P4Model for BentLayer {
    fn visit_perturbations(&mut self, _f: &mut dyn FnMut(&mut dyn Perturbation)) {}
}

impl Bijection for BentLayer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(x, self.dim)?;
        Ok(Self::map(x, !self.inverted))
    }

    fn inverse(&self, y: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(y, self.dim)?;
        Ok(Self::map(y, self.inverted))
    }

    fn backward(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(x, self.dim)?;
        Ok(Self::map_backward(x, grad_y, grad_logdet, !self.inverted))
    }

    fn backward_inverse(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(y, self.dim)?;
        Ok(Self::map_backward(y, grad_x, grad_logdet, self.inverted))
    }
}
