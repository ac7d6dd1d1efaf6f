use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size of a new basis vector below which the Krylov space is
/// treated as invariant.
const BREAKDOWN_TOL: f64 = 1e-14;

/// Arnoldi factorization `A Q_r = Q_{r+1} H_r`.
///
/// When `invariant` is set the last column of `q` is zero and the last row of
/// `h` vanishes; only the first `rank` columns of `q` are orthonormal.
#[derive(Debug, Clone)]
pub struct KrylovFactors {
    /// `n × (rank + 1)`.
    pub q: DMatrix<f64>,
    /// `(rank + 1) × rank`, upper Hessenberg.
    pub h: DMatrix<f64>,
    /// Norm of the seed vector.
    pub beta: f64,
    pub rank: usize,
    /// Estimated `min_z ‖H z − β e₁‖ / β` at termination.
    pub residual: f64,
    /// Arnoldi broke down on an exactly invariant subspace.
    pub invariant: bool,
}

impl KrylovFactors {
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// `Q_r z`.
    pub fn lift(&self, z: &DVector<f64>) -> DVector<f64> {
        self.q.columns(0, self.rank) * z
    }
}

/// Runs Arnoldi with modified Gram-Schmidt and one reorthogonalization pass.
///
/// Stops at the smallest rank whose GMRES residual estimate drops to `tol`,
/// at `r_max`, or on breakdown.
pub fn arnoldi<F>(mut apply: F, seed: &DVector<f64>, tol: f64, r_max: usize) -> Result<KrylovFactors>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let n = seed.len();
    let beta = seed.norm();
    if !beta.is_finite() {
        return Err(Error::InvalidInput("Arnoldi seed is not finite".into()));
    }
    if beta == 0.0 {
        return Err(Error::InvalidInput("Arnoldi seed is zero".into()));
    }
    if r_max == 0 {
        return Err(Error::InvalidInput("Arnoldi needs r_max >= 1".into()));
    }
    let r_max = r_max.min(n);

    let mut basis: Vec<DVector<f64>> = vec![seed / beta];
    let mut h = DMatrix::zeros(r_max + 1, r_max);
    // Givens rotations applied to H and to β e₁ give the residual for free.
    let mut rotations: Vec<(f64, f64)> = Vec::with_capacity(r_max);
    let mut g = vec![0.0; r_max + 1];
    g[0] = beta;

    let mut rank = 0;
    let mut residual = 1.0;
    let mut invariant = false;

    for j in 0..r_max {
        let mut w = apply(&basis[j]);
        if w.len() != n {
            return Err(Error::ShapeMismatch(format!("operator returned length {}, expected {n}", w.len())));
        }
        let w_norm = w.norm();
        for _ in 0..2 {
            for (i, qi) in basis.iter().enumerate() {
                let c = qi.dot(&w);
                h[(i, j)] += c;
                w.axpy(-c, qi, 1.0);
            }
        }
        let h_next = w.norm();
        h[(j + 1, j)] = h_next;
        rank = j + 1;

        let mut col: Vec<f64> = (0..=j + 1).map(|i| h[(i, j)]).collect();
        for (i, &(c, s)) in rotations.iter().enumerate() {
            let (a, b) = (col[i], col[i + 1]);
            col[i] = c * a + s * b;
            col[i + 1] = -s * a + c * b;
        }
        let (a, b) = (col[j], col[j + 1]);
        let rho = a.hypot(b);
        let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (a / rho, b / rho) };
        rotations.push((c, s));
        g[j + 1] = -s * g[j];
        g[j] *= c;
        residual = if rho == 0.0 { g[j].abs() / beta } else { g[j + 1].abs() / beta };

        if h_next <= BREAKDOWN_TOL * w_norm || h_next == 0.0 || !h_next.is_finite() {
            h[(j + 1, j)] = 0.0;
            invariant = true;
            basis.push(DVector::zeros(n));
            break;
        }
        basis.push(w / h_next);
        if residual <= tol {
            break;
        }
    }

    let q = DMatrix::from_columns(&basis);
    let h = h.view((0, 0), (rank + 1, rank)).into_owned();
    Ok(KrylovFactors { q, h, beta, rank, residual, invariant })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hessenberg_lsq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn identity_operator_is_rank_one() {
        let seed = DVector::from_vec(vec![3.0, -1.0, 2.0]);
        let f = arnoldi(|v| v.clone(), &seed, 1e-10, 3).unwrap();
        assert_eq!(f.rank, 1);
        assert!((f.h[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(f.h[(1, 0)], 0.0);
        assert!(f.invariant);
        assert!(f.residual < 1e-15);
    }

    #[test]
    fn diagonal_solves_linear_system() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let seed = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let f = arnoldi(|v| &a * v, &seed, 1e-12, 10).unwrap();
        assert!(f.rank <= 3);
        assert!(f.residual <= 1e-12);
        let z = hessenberg_lsq(&f.h, f.beta, 0.0).unwrap().z;
        let x = f.lift(&z);
        // Direct solve oracle.
        let expected = DVector::from_vec(vec![1.0, 0.5, 1.0 / 3.0]);
        assert!((x - expected).norm() < 1e-10);
    }

    #[test]
    fn spd_relation_and_orthonormality() {
        let a = spd(10, 1);
        let seed = DVector::from_fn(10, |i, _| (i as f64).sin() + 0.3);
        let f = arnoldi(|v| &a * v, &seed, 1e-10, 10).unwrap();
        let qr = f.q.columns(0, f.rank).into_owned();
        let lhs = &a * &qr;
        let rhs = &f.q * &f.h;
        assert!((lhs - rhs).norm() <= 1e-8);
        let cols = if f.invariant { f.rank } else { f.rank + 1 };
        let qq = f.q.columns(0, cols).transpose() * f.q.columns(0, cols);
        assert!((qq - DMatrix::identity(cols, cols)).norm() < 1e-10);
    }

    #[test]
    fn symmetric_operator_gives_tridiagonal_h() {
        let a = spd(8, 7);
        let seed = DVector::from_element(8, 1.0);
        let f = arnoldi(|v| &a * v, &seed, 0.0, 8).unwrap();
        for i in 0..f.h.nrows() {
            for j in 0..f.h.ncols() {
                if i > j + 1 || j > i + 1 {
                    assert!(f.h[(i, j)].abs() <= 1e-8, "H[{i}][{j}] = {}", f.h[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn residual_estimate_matches_direct_lsq() {
        let a = spd(12, 5);
        let seed = DVector::from_fn(12, |i, _| 1.0 + i as f64 * 0.1);
        let f = arnoldi(|v| &a * v, &seed, 0.0, 5).unwrap();
        let z = hessenberg_lsq(&f.h, f.beta, 0.0).unwrap().z;
        let mut e1 = DVector::zeros(f.rank + 1);
        e1[0] = f.beta;
        let direct = (&f.h * z - e1).norm() / f.beta;
        assert!((direct - f.residual).abs() < 1e-12);
    }

    #[test]
    fn zero_seed_rejected() {
        let r = arnoldi(|v| v.clone(), &DVector::zeros(3), 1e-8, 3);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
