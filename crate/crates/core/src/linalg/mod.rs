//! Dense linear algebra for invertible linear layers.
//!
//! Vectors and matrices are plain row-major `f64` buffers. The interesting
//! part is [`rank_one`]: matrix-vector products, inverses and determinants of
//! `A + u vᵀ` expressed through a stored inverse of `A`, never through a
//! fresh factorization.

mod dense;
mod det;
pub mod oracle;
pub mod rank_one;

pub use dense::{DenseMatrix, DenseVector};
pub use det::SignLogDet;
pub use rank_one::{
    det_lemma_factor, matvec, newton_schulz_refine, newton_schulz_step, rank_one_matvec, sherman_morrison_solve,
    sherman_morrison_solve_transpose, sherman_morrison_update,
};

pub(crate) use dense::{axpy, dot};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: matrix is {rows}x{cols}, expected square")]
    NotSquare {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("rank-one update is singular (determinant factor {factor:e})")]
    SingularUpdate { factor: f64 },
    #[error("matrix is singular (zero pivot in column {pivot})")]
    Singular { pivot: usize },
}
