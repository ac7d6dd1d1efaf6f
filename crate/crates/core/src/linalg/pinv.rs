use nalgebra::{DMatrix, DVector, SVD};

use super::ensure_finite;
use crate::error::{Error, Result};

/// Relative singular-value cutoff for the pseudo-inverse.
pub const PINV_RTOL: f64 = 1e-12;

/// `H†` held as `V diag(1/σ) Uᵀ`, reusable for any number of right-hand sides.
#[derive(Debug, Clone)]
pub struct Pseudoinverse {
    u: DMatrix<f64>,
    inv_sigma: DVector<f64>,
    v: DMatrix<f64>,
}

impl Pseudoinverse {
    pub fn new(h: &DMatrix<f64>) -> Result<Self> {
        ensure_finite(h, "matrix")?;
        let svd = SVD::try_new(h.clone(), true, true, f64::EPSILON, 10_000)
            .ok_or(Error::SvdNoConvergence { iterations: 10_000 })?;
        let u = svd.u.expect("requested U");
        let v = svd.v_t.expect("requested Vᵀ").transpose();
        let smax = svd.singular_values.max();
        let inv_sigma = svd.singular_values.map(|s| if s > PINV_RTOL * smax && s > 0.0 { 1.0 / s } else { 0.0 });
        Ok(Self { u, inv_sigma, v })
    }

    /// Rows of `H`.
    pub fn rows(&self) -> usize {
        self.u.nrows()
    }

    /// Columns of `H`.
    pub fn cols(&self) -> usize {
        self.v.nrows()
    }

    /// `H† x` for `x` of length `rows()`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.u.tr_mul(x).component_mul(&self.inv_sigma);
        &self.v * t
    }

    /// `(H†)ᵀ y` for `y` of length `cols()`.
    pub fn apply_transpose(&self, y: &DVector<f64>) -> DVector<f64> {
        let t = self.v.tr_mul(y).component_mul(&self.inv_sigma);
        &self.u * t
    }
}

pub fn pseudoinverse_apply(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(rhs, h.nrows())?;
    Ok(Pseudoinverse::new(h)?.apply(rhs))
}

pub fn pseudoinverse_apply_transpose(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(rhs, h.ncols())?;
    Ok(Pseudoinverse::new(h)?.apply_transpose(rhs))
}

fn check_len(v: &DVector<f64>, n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::ShapeMismatch(format!("vector length {} != {n}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("right-hand side contains non-finite entries".into()));
    }
    Ok(())
}
