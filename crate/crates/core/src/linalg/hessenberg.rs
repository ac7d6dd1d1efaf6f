use nalgebra::{DMatrix, DVector, SVD};

use super::ensure_finite;
use crate::error::{Error, Result};

/// Singular values below this fraction of the largest are treated as zero
/// when `λ = 0`.
const RANK_TOL: f64 = 1e-12;

/// The penalized projected problem `min_z ½‖H z − β e₁‖² + (λ/2)‖z‖²`,
/// factorized once so that many values of `λ` are cheap.
#[derive(Debug, Clone)]
pub struct HessenbergLsq {
    sigma: DVector<f64>,
    v: DMatrix<f64>,
    /// `Uᵀ β e₁`.
    proj: DVector<f64>,
    /// `‖β e₁‖² − ‖Uᵀ β e₁‖²`, the part of the right-hand side outside range(H).
    outside: f64,
    cutoff: f64,
}

#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub z: DVector<f64>,
    /// `λ = 0` and some singular values were truncated (minimum-norm solution).
    pub rank_deficient: bool,
}

impl HessenbergLsq {
    pub fn new(h: &DMatrix<f64>, beta: f64) -> Result<Self> {
        ensure_finite(h, "Hessenberg matrix")?;
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidInput(format!("beta must be positive, got {beta}")));
        }
        if h.ncols() == 0 || h.nrows() < h.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "expected (r+1) x r Hessenberg, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        let svd = SVD::try_new(h.clone(), true, true, f64::EPSILON, 10_000)
            .ok_or(Error::SvdNoConvergence { iterations: 10_000 })?;
        let u = svd.u.expect("requested U");
        let v = svd.v_t.expect("requested Vᵀ").transpose();
        let proj = u.row(0).transpose() * beta;
        let outside = (beta * beta - proj.norm_squared()).max(0.0);
        let sigma = svd.singular_values;
        let cutoff = RANK_TOL * sigma.max();
        Ok(Self { sigma, v, proj, outside, cutoff })
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    fn filter(&self, lambda: f64) -> impl Iterator<Item = f64> + '_ {
        self.sigma.iter().map(move |&s| {
            if lambda == 0.0 {
                if s > self.cutoff && s > 0.0 {
                    1.0 / s
                } else {
                    0.0
                }
            } else {
                s / (s * s + lambda)
            }
        })
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.sigma.iter().any(|&s| s <= self.cutoff || s == 0.0)
    }

    pub fn solve(&self, lambda: f64) -> LsqSolution {
        let coeffs =
            DVector::from_iterator(self.sigma.len(), self.filter(lambda).zip(self.proj.iter()).map(|(f, c)| f * c));
        LsqSolution { z: &self.v * coeffs, rank_deficient: lambda == 0.0 && self.is_rank_deficient() }
    }

    /// `‖z*(λ)‖`, without forming `z`.
    pub fn norm(&self, lambda: f64) -> f64 {
        self.filter(lambda).zip(self.proj.iter()).map(|(f, c)| (f * c).powi(2)).sum::<f64>().sqrt()
    }

    /// `d‖z*(λ)‖/dλ`.
    pub fn norm_derivative(&self, lambda: f64) -> f64 {
        let n = self.norm(lambda);
        if n == 0.0 {
            return 0.0;
        }
        let d: f64 =
            self.sigma.iter().zip(self.proj.iter()).map(|(&s, &c)| -(s * c).powi(2) / (s * s + lambda).powi(3)).sum();
        d / n
    }

    /// `‖H z*(λ) − β e₁‖`.
    pub fn residual_norm(&self, lambda: f64) -> f64 {
        let inside: f64 = self
            .filter(lambda)
            .zip(self.sigma.iter())
            .zip(self.proj.iter())
            .map(|((f, &s), &c)| ((s * f - 1.0) * c).powi(2))
            .sum();
        (inside + self.outside).sqrt()
    }
}

/// Minimizer of `½‖H z − β e₁‖² + (λ/2)‖z‖²`.
pub fn hessenberg_lsq(h: &DMatrix<f64>, beta: f64, lambda: f64) -> Result<LsqSolution> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(HessenbergLsq::new(h, beta)?.solve(lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hessenberg(r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(r + 1, r, |i, j| if i <= j + 1 { rng.random_range(-1.0..1.0) } else { 0.0 })
    }

    #[test]
    fn scalar_cases() {
        let h = DMatrix::from_column_slice(2, 1, &[2.0, 0.0]);
        assert!((hessenberg_lsq(&h, 1.0, 0.0).unwrap().z[0] - 0.5).abs() < 1e-15);
        assert!((hessenberg_lsq(&h, 1.0, 4.0).unwrap().z[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn matches_normal_equations() {
        let h = random_hessenberg(5, 11);
        let (beta, lambda) = (1.7, 1e-3);
        let z = hessenberg_lsq(&h, beta, lambda).unwrap().z;
        let mut rhs = DVector::zeros(6);
        rhs[0] = beta;
        let lhs = h.transpose() * &h + DMatrix::identity(5, 5) * lambda;
        let oracle = lhs.lu().solve(&(h.transpose() * rhs)).unwrap();
        assert!((z - &oracle).norm() <= 1e-10 * oracle.norm());
    }

    #[test]
    fn rank_deficient_is_flagged() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let s = hessenberg_lsq(&h, 1.0, 0.0).unwrap();
        assert!(s.rank_deficient);
        assert!((s.z[0] - 1.0).abs() < 1e-15 && s.z[1].abs() < 1e-15);
    }

    #[test]
    fn residual_norm_matches_direct() {
        let h = random_hessenberg(4, 2);
        let sys = HessenbergLsq::new(&h, 2.0).unwrap();
        for &lam in &[0.0, 0.1, 3.0] {
            let z = sys.solve(lam).z;
            let mut e1 = DVector::zeros(5);
            e1[0] = 2.0;
            assert!(((&h * z - e1).norm() - sys.residual_norm(lam)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn norm_is_monotone_in_lambda(seed in 0u64..500, l1 in 0.0f64..10.0, dl in 0.0f64..10.0) {
            let h = random_hessenberg(4, seed);
            let sys = HessenbergLsq::new(&h, 1.0).unwrap();
            prop_assert!(sys.norm(l1) + 1e-12 >= sys.norm(l1 + dl));
        }
    }
}
