//! Dense O(n³) reference routines: LU with partial pivoting, and eigenvalues.
//!
//! These exist to check the rank-one machinery and to produce diagnostics
//! (eigenvalue traces, one-off initialization). Training code never calls
//! them.

use nalgebra::DMatrix;

use super::{DenseMatrix, LinalgError, SignLogDet};

/// Packed LU factors with row permutation: `P A = L U`, unit-lower `L`.
#[derive(Debug, Clone)]
pub struct LuDecomposition {
    lu: DenseMatrix,
    perm: Vec<usize>,
    perm_sign: i8,
}

impl LuDecomposition {
    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    pub fn det(&self) -> SignLogDet {
        let n = self.dim();
        let mut det = SignLogDet::new(self.perm_sign, 0.0);
        for i in 0..n {
            det = det * SignLogDet::from_value(self.lu[(i, i)]);
        }
        det
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.lu[(i, k)] * x[k];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.lu[(i, k)] * x[k];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.dim();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// LU factorization with partial pivoting. Fails only on an exactly zero pivot.
pub fn lu_decompose(a: &DenseMatrix) -> Result<LuDecomposition, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            op: "lu_decompose",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut perm_sign = 1i8;
    for k in 0..n {
        let (p, pivot) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot == 0.0 {
            return Err(LinalgError::Singular { pivot: k });
        }
        if p != k {
            for j in 0..n {
                let tmp = lu[(k, j)];
                lu[(k, j)] = lu[(p, j)];
                lu[(p, j)] = tmp;
            }
            perm.swap(k, p);
            perm_sign = -perm_sign;
        }
        let d = lu[(k, k)];
        for i in k + 1..n {
            let l = lu[(i, k)] / d;
            lu[(i, k)] = l;
            if l != 0.0 {
                for j in k + 1..n {
                    lu[(i, j)] -= l * lu[(k, j)];
                }
            }
        }
    }
    Ok(LuDecomposition {
        lu,
        perm,
        perm_sign,
    })
}

pub fn lu_invert(a: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    Ok(lu_decompose(a)?.inverse())
}

/// Determinant via LU. An exactly singular matrix returns [`SignLogDet::ZERO`].
pub fn lu_det(a: &DenseMatrix) -> Result<SignLogDet, LinalgError> {
    match lu_decompose(a) {
        Ok(lu) => Ok(lu.det()),
        Err(LinalgError::Singular { .. }) => Ok(SignLogDet::ZERO),
        Err(e) => Err(e),
    }
}

fn to_nalgebra(a: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(a.rows(), a.cols(), a.as_slice())
}

/// Eigenvalues of a general real matrix as `(re, im)` pairs, sorted by real
/// part then imaginary part.
pub fn eigenvalues(a: &DenseMatrix) -> Result<Vec<(f64, f64)>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            op: "eigenvalues",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let ev = to_nalgebra(a).complex_eigenvalues();
    let mut out: Vec<(f64, f64)> = ev.iter().map(|c| (c.re, c.im)).collect();
    out.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    Ok(out)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            op: "symmetric_eigenvalues",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let mut ev: Vec<f64> = to_nalgebra(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}
