//! Dense kernels and the factorizations shared by the inner and outer solvers.
//!
//! Matrices are [`nalgebra::DMatrix<f64>`], which stores entries column-major,
//! so the feature column of one sample is contiguous.

mod arnoldi;
mod hessenberg;
mod pinv;
mod svd;

pub use arnoldi::{arnoldi, KrylovFactors};
pub use hessenberg::{hessenberg_lsq, HessenbergLsq, LsqSolution};
pub use pinv::{pseudoinverse_apply, pseudoinverse_apply_transpose, Pseudoinverse};
pub use svd::{reduced_svd, SvdFactors};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub(crate) fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite entries")))
    }
}

/// Frobenius inner product `⟨A, B⟩ = Σ a_ij b_ij`.
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
