//! Rank-one update kernels.
//!
//! Every routine here works with matrix-vector products only (O(n²)); the
//! perturbed matrix `A + u vᵀ` is never formed. `newton_schulz_step` is the one
//! O(n³) routine and is only run on a merge schedule.

use super::dense::{axpy, dot};
use super::{DenseMatrix, DenseVector, LinalgError};

/// Determinant-lemma factors at or below this magnitude are treated as singular.
pub const SINGULAR_FACTOR: f64 = 1e-300;

fn check_square(op: &'static str, m: &DenseMatrix) -> Result<usize, LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::NotSquare {
            op,
            rows: m.rows(),
            cols: m.cols(),
        });
    }
    Ok(m.rows())
}

fn check_len(op: &'static str, n: usize, v: &[f64]) -> Result<(), LinalgError> {
    if v.len() != n {
        return Err(LinalgError::DimensionMismatch {
            op,
            expected: n,
            found: v.len(),
        });
    }
    Ok(())
}

fn check_factor(factor: f64) -> Result<(), LinalgError> {
    if !(factor.abs() > SINGULAR_FACTOR) {
        return Err(LinalgError::SingularUpdate { factor });
    }
    Ok(())
}

/// `A · x`.
pub fn matvec(a: &DenseMatrix, x: &[f64]) -> Result<DenseVector, LinalgError> {
    a.mul_vec(x)
}

/// `(A + u vᵀ) · x`, computed as `A x + u (vᵀ x)`.
pub fn rank_one_matvec(
    a: &DenseMatrix,
    u: &[f64],
    v: &[f64],
    x: &[f64],
) -> Result<DenseVector, LinalgError> {
    let n = check_square("rank_one_matvec", a)?;
    for w in [u, v, x] {
        check_len("rank_one_matvec", n, w)?;
    }
    let mut out = DenseVector::zeros(n);
    a.gemv_into(x, &mut out);
    axpy(dot(v, x), u, &mut out);
    Ok(out)
}

/// `G = 1 + vᵀ A⁻¹ u`, the determinant-lemma factor `det(A + u vᵀ) / det(A)`.
///
/// `G == 0` is a legitimate result: the perturbed matrix is singular.
pub fn det_lemma_factor(a_inv: &DenseMatrix, u: &[f64], v: &[f64]) -> Result<f64, LinalgError> {
    let n = check_square("det_lemma_factor", a_inv)?;
    check_len("det_lemma_factor", n, u)?;
    check_len("det_lemma_factor", n, v)?;
    let mut w = vec![0.0; n];
    a_inv.gemv_into(u, &mut w);
    Ok(1.0 + dot(v, &w))
}

/// Sherman-Morrison: `(A + u vᵀ)⁻¹ = A⁻¹ − (A⁻¹u)(vᵀA⁻¹) / G`.
pub fn sherman_morrison_update(
    a_inv: &DenseMatrix,
    u: &[f64],
    v: &[f64],
) -> Result<DenseMatrix, LinalgError> {
    let n = check_square("sherman_morrison_update", a_inv)?;
    check_len("sherman_morrison_update", n, u)?;
    check_len("sherman_morrison_update", n, v)?;
    let mut w = vec![0.0; n];
    a_inv.gemv_into(u, &mut w);
    let factor = 1.0 + dot(v, &w);
    check_factor(factor)?;
    let mut z = vec![0.0; n];
    a_inv.gemv_transpose_into(v, &mut z);
    let mut out = a_inv.clone();
    out.add_outer(-1.0 / factor, &w, &z);
    Ok(out)
}

/// `(A + u vᵀ)⁻¹ · y` without forming the updated inverse.
pub fn sherman_morrison_solve(
    a_inv: &DenseMatrix,
    u: &[f64],
    v: &[f64],
    y: &[f64],
) -> Result<DenseVector, LinalgError> {
    let n = check_square("sherman_morrison_solve", a_inv)?;
    for w in [u, v, y] {
        check_len("sherman_morrison_solve", n, w)?;
    }
    let mut w = vec![0.0; n];
    a_inv.gemv_into(u, &mut w);
    let factor = 1.0 + dot(v, &w);
    check_factor(factor)?;
    let mut out = DenseVector::zeros(n);
    a_inv.gemv_into(y, &mut out);
    let coeff = dot(v, &out) / factor;
    axpy(-coeff, &w, &mut out);
    Ok(out)
}

/// `(A + u vᵀ)⁻ᵀ · y`, the transposed counterpart of [`sherman_morrison_solve`].
///
/// Uses `(A + u vᵀ)ᵀ = Aᵀ + v uᵀ`, which shares the factor `G`.
pub fn sherman_morrison_solve_transpose(
    a_inv: &DenseMatrix,
    u: &[f64],
    v: &[f64],
    y: &[f64],
) -> Result<DenseVector, LinalgError> {
    let n = check_square("sherman_morrison_solve_transpose", a_inv)?;
    for w in [u, v, y] {
        check_len("sherman_morrison_solve_transpose", n, w)?;
    }
    let mut w = vec![0.0; n];
    a_inv.gemv_transpose_into(v, &mut w);
    let factor = 1.0 + dot(u, &w);
    check_factor(factor)?;
    let mut out = DenseVector::zeros(n);
    a_inv.gemv_transpose_into(y, &mut out);
    let coeff = dot(u, &out) / factor;
    axpy(-coeff, &w, &mut out);
    Ok(out)
}

/// One Newton-Schulz iteration `X (2I − A X)`.
///
/// Converges quadratically when `‖I − A X‖ < 1` in any submultiplicative norm;
/// diverges otherwise.
pub fn newton_schulz_step(a: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = check_square("newton_schulz_step", a)?;
    if x.rows() != n || x.cols() != n {
        return Err(LinalgError::DimensionMismatch {
            op: "newton_schulz_step",
            expected: n,
            found: x.rows(),
        });
    }
    // 2I − A X
    let mut m = a.matmul(x)?;
    for v in m.as_mut_slice().iter_mut() {
        *v = -*v;
    }
    for i in 0..n {
        m[(i, i)] += 2.0;
    }
    x.matmul(&m)
}

/// Newton-Schulz correction that refuses to run outside its convergence region.
///
/// Returns the corrected inverse and the residual `‖I − A X‖∞` (induced norm)
/// measured before the step, or `None` with that residual when it is not
/// below `max_residual`.
pub fn newton_schulz_refine(
    a: &DenseMatrix,
    x: &DenseMatrix,
    max_residual: f64,
) -> Result<(Option<DenseMatrix>, f64), LinalgError> {
    let n = check_square("newton_schulz_refine", a)?;
    // R = A X − I
    let mut r = a.matmul(x)?;
    for i in 0..n {
        r[(i, i)] -= 1.0;
    }
    let residual = r.norm_inf();
    if !(residual < max_residual) {
        return Ok((None, residual));
    }
    // X (2I − A X) = X − X R
    let xr = x.matmul(&r)?;
    let mut out = x.clone();
    for (o, d) in out.as_mut_slice().iter_mut().zip(xr.as_slice()) {
        *o -= d;
    }
    Ok((Some(out), residual))
}
