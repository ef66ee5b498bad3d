use super::{check_dim, Bijection, FlowError};
use crate::linalg::DenseMatrix;
use crate::p4inv::P4InvLayer;

impl Bijection for P4InvLayer {
    fn dim(&self) -> usize {
        P4InvLayer::dim(self)
    }

    fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(x, P4InvLayer::dim(self))?;
        let ld = self.log_abs_det();
        Ok((self.forward_batch(x), vec![ld; x.rows()]))
    }

    fn inverse(&self, y: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>), FlowError> {
        check_dim(y, P4InvLayer::dim(self))?;
        let ld = -self.log_abs_det();
        Ok((self.inverse_batch(y)?, vec![ld; y.rows()]))
    }

    fn backward(
        &mut self,
        x: &DenseMatrix,
        grad_y: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(x, P4InvLayer::dim(self))?;
        Ok(self.backward_batch(x, grad_y, grad_logdet.iter().sum()))
    }

    fn backward_inverse(
        &mut self,
        y: &DenseMatrix,
        grad_x: &DenseMatrix,
        grad_logdet: &[f64],
    ) -> Result<DenseMatrix, FlowError> {
        check_dim(y, P4InvLayer::dim(self))?;
        Ok(self.backward_inverse_batch(y, grad_x, grad_logdet.iter().sum())?)
    }

    fn penalty(&self) -> f64 {
        P4InvLayer::penalty(self)
    }

    fn penalty_backward(&mut self, scale: f64) -> f64 {
        P4InvLayer::penalty_backward(self, scale)
    }
}
