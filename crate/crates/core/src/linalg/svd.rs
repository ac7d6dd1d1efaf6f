use nalgebra::{DMatrix, DVector, SVD};

use super::ensure_finite;
use crate::error::{Error, Result};

const MAX_SVD_ITER: usize = 10_000;

/// Thin SVD `A = U diag(Σ) Vᵀ` of a matrix with no more rows than columns.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    /// `rows × rows`, orthonormal columns.
    pub u: DMatrix<f64>,
    /// Descending, nonnegative.
    pub sigma: DVector<f64>,
    /// `cols × rows`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

pub fn reduced_svd(a: &DMatrix<f64>) -> Result<SvdFactors> {
    ensure_finite(a, "matrix")?;
    if a.nrows() > a.ncols() {
        return Err(Error::UnsupportedShape(format!(
            "reduced SVD expects rows <= cols, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, MAX_SVD_ITER)
        .ok_or(Error::SvdNoConvergence { iterations: MAX_SVD_ITER })?;
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    Ok(SvdFactors { u, sigma: svd.singular_values, v })
}
