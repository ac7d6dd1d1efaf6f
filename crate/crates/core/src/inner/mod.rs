//! Partial minimization over the linear block: `W(θ) = argmin_W Φ(W, θ)` for
//! fixed features `Z = F(Y, θ)`.
//!
//! Least squares is solved in closed form from the SVD of `Z/√|T|`;
//! cross-entropy losses use a Newton-Krylov trust-region iteration. Both keep
//! their factorizations so the implicit Jacobian `J_θ w(θ)` can reuse them.

mod trust_region;

pub use trust_region::{lambda_search, tr_lambda_search, KrylovModel, KrylovStep, TrustRegionParams};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{arnoldi, reduced_svd, KrylovFactors, SvdFactors};
use crate::loss::{LossEval, LossKind};

/// `min_W (1/|T|) Σ L(W z_i, c_i) + (α₂/2)‖W‖²_F` for fixed features `z`.
#[derive(Debug, Clone, Copy)]
pub struct InnerProblem<'a> {
    /// `N_out × |T|`.
    pub z: &'a DMatrix<f64>,
    /// `N_target × |T|`.
    pub c: &'a DMatrix<f64>,
    pub loss: LossKind,
    pub alpha2: f64,
}

/// Settings of the Newton-Krylov inner solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerConfig {
    pub eps_rel: f64,
    pub eps_abs: f64,
    /// Maximum Krylov rank per Newton step.
    pub r_max: usize,
    /// Relative Arnoldi residual at which the Krylov build stops.
    pub krylov_tol: f64,
    pub trust_region: TrustRegionParams,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            eps_rel: 1e-10,
            eps_abs: 1e-10,
            r_max: 20,
            krylov_tol: 1e-10,
            trust_region: TrustRegionParams::default(),
        }
    }
}

impl InnerConfig {
    /// Both gradient tolerances set to `tol`.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.eps_rel = tol;
        self.eps_abs = tol;
        self
    }
}

#[derive(Debug, Clone)]
pub enum InnerFactors {
    /// SVD of `Z/√|T|` (least squares).
    Svd(SvdFactors),
    /// Arnoldi factors of `∇²_w Φ` at the returned `W` (cross-entropy).
    Krylov(KrylovFactors),
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    /// `N_target × N_out`.
    pub w: DMatrix<f64>,
    pub factors: InnerFactors,
    /// Objective `Φ(W, θ)` without the `θ` regularizer.
    pub value: f64,
    pub grad_norm: f64,
    pub initial_grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Krylov rank of every accepted Newton step.
    pub ranks: Vec<usize>,
    /// Largest `|‖z‖ − Δ|/Δ` over constrained λ searches.
    pub max_radius_error: f64,
    /// Largest `‖δw‖/Δ` over accepted steps.
    pub max_step_ratio: f64,
    /// Objective values after each accepted step, starting at the warm start.
    pub history: Vec<f64>,
}

impl InnerProblem<'_> {
    fn check(&self) -> Result<()> {
        if self.z.ncols() != self.c.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "features have {} samples, targets {}",
                self.z.ncols(),
                self.c.ncols()
            )));
        }
        if self.z.ncols() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        if !(self.alpha2 >= 0.0) {
            return Err(Error::InvalidInput(format!("alpha2 must be >= 0, got {}", self.alpha2)));
        }
        Ok(())
    }

    pub fn n_target(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.z.nrows()
    }

    /// Objective value, loss evaluation and `∇_W Φ`.
    pub fn evaluate(&self, w: &DMatrix<f64>) -> Result<(f64, LossEval, DMatrix<f64>)> {
        let loss = self.loss.evaluate(&(w * self.z), self.c)?;
        let value = loss.value + 0.5 * self.alpha2 * w.norm_squared();
        let grad = &loss.grad * self.z.transpose() + w * self.alpha2;
        Ok((value, loss, grad))
    }

    /// `∇²_W Φ [V] = Σ_i (∇²L_i (V z_i)) z_iᵀ + α₂ V`, matrix-free.
    pub fn hess_apply(&self, loss: &LossEval, v: &DMatrix<f64>) -> DMatrix<f64> {
        loss.hess_apply(&(v * self.z)) * self.z.transpose() + v * self.alpha2
    }
}

fn as_matrix(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

fn as_vector(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Closed-form least-squares solve `W = (1/√|T|) C V diag(σ/(σ²+α₂)) Uᵀ`.
pub fn solve_ls(p: &InnerProblem<'_>) -> Result<InnerSolution> {
    p.check()?;
    if p.loss != LossKind::LeastSquares {
        return Err(Error::InvalidInput("solve_ls needs the least-squares loss".into()));
    }
    let t = p.z.ncols();
    if t < p.n_out() {
        return Err(Error::UnsupportedShape(format!(
            "batch of {t} samples is smaller than the feature width {}",
            p.n_out()
        )));
    }
    let scale = 1.0 / (t as f64).sqrt();
    let svd = reduced_svd(&(p.z * scale))?;
    let smax = svd.sigma.max();
    let filt = svd.sigma.map(|s| {
        let d = s * s + p.alpha2;
        if d > 0.0 && s > 1e-15 * smax {
            s / d
        } else {
            0.0
        }
    });
    // Each row of W solves its own regularized problem; done together here.
    let mut cv = p.c * &svd.v;
    for (j, f) in filt.iter().enumerate() {
        cv.column_mut(j).scale_mut(f * scale);
    }
    let w = cv * svd.u.transpose();
    let (value, _, grad) = p.evaluate(&w)?;
    let grad_norm = grad.norm();
    Ok(InnerSolution {
        w,
        factors: InnerFactors::Svd(svd),
        value,
        grad_norm,
        initial_grad_norm: grad_norm,
        iterations: 0,
        converged: true,
        ranks: Vec::new(),
        max_radius_error: 0.0,
        max_step_ratio: 0.0,
        history: vec![value],
    })
}

/// Newton-Krylov trust-region solve for the cross-entropy losses, started at
/// `warm`.
pub fn solve_ce(p: &InnerProblem<'_>, warm: &DMatrix<f64>, cfg: &InnerConfig) -> Result<InnerSolution> {
    p.check()?;
    if !p.loss.is_cross_entropy() {
        return Err(Error::InvalidInput("solve_ce needs a cross-entropy loss".into()));
    }
    if !(p.alpha2 > 0.0) {
        return Err(Error::InvalidInput("cross-entropy inner problem needs alpha2 > 0".into()));
    }
    if warm.shape() != (p.n_target(), p.n_out()) {
        return Err(Error::ShapeMismatch(format!(
            "warm start {:?}, expected {:?}",
            warm.shape(),
            (p.n_target(), p.n_out())
        )));
    }
    cfg.trust_region.validate()?;
    let (rows, cols) = warm.shape();
    let tr = &cfg.trust_region;

    let mut w = warm.clone();
    let (mut value, mut loss, mut grad) = p.evaluate(&w)?;
    let g0 = grad.norm();
    let mut gnorm = g0;
    let converged = |g: f64| g <= cfg.eps_abs || g <= cfg.eps_rel * g0;

    let mut delta = tr.delta0;
    let mut model: Option<KrylovModel> = None;
    let mut iterations = 0;
    let mut ranks = Vec::new();
    let mut history = vec![value];
    let mut max_radius_error: f64 = 0.0;
    let mut max_step_ratio: f64 = 0.0;
    let mut done = converged(gnorm);

    while !done && iterations < tr.max_iter {
        iterations += 1;
        if model.is_none() {
            let seed = as_vector(&grad);
            let factors = arnoldi(
                |v| as_vector(&p.hess_apply(&loss, &as_matrix(v, rows, cols))),
                &seed,
                cfg.krylov_tol,
                cfg.r_max,
            )?;
            model = Some(KrylovModel::new(factors)?);
        }
        let m = model.as_ref().expect("built above");
        let step = m.step(delta)?;
        if let Some(e) = step.radius_error {
            max_radius_error = max_radius_error.max(e);
        }
        let w_trial = &w + as_matrix(&step.step, rows, cols);
        let (v_trial, loss_trial, grad_trial) = p.evaluate(&w_trial)?;
        let actual = value - v_trial;
        let rho = if step.predicted > 0.0 { actual / step.predicted } else { f64::NEG_INFINITY };
        // Near the minimizer the reduction drowns in rounding error; fall back
        // to requiring a smaller gradient.
        let noise_floor = 1e-13 * value.abs().max(1e-300);
        let accepted = if step.predicted.is_finite() && step.predicted > 0.0 && step.predicted <= noise_floor {
            grad_trial.norm() < gnorm && v_trial.is_finite()
        } else {
            v_trial.is_finite() && actual > 0.0 && rho > tr.eta_accept
        };
        let rho_eff = if accepted && step.predicted <= noise_floor { 1.0 } else { rho };
        let prev_delta = delta;
        delta = tr.update(delta, rho_eff, step.norm, accepted);
        if accepted {
            max_step_ratio = max_step_ratio.max(step.norm / prev_delta);
            ranks.push(m.factors.rank);
            w = w_trial;
            value = v_trial;
            loss = loss_trial;
            grad = grad_trial;
            gnorm = grad.norm();
            history.push(value);
            model = None;
            done = converged(gnorm);
        }
    }

    // Factorization of the Hessian at the returned W for the implicit Jacobian.
    let factors = hessian_factors(p, &loss, &grad, cfg)?;
    Ok(InnerSolution {
        w,
        factors: InnerFactors::Krylov(factors),
        value,
        grad_norm: gnorm,
        initial_grad_norm: g0,
        iterations,
        converged: done,
        ranks,
        max_radius_error,
        max_step_ratio,
        history,
    })
}

/// Arnoldi factors of `∇²_W Φ` seeded by the gradient, or by a constant
/// vector when the gradient vanishes. The build runs to `r_max` or an
/// invariant subspace since the factors serve as an inverse beyond one solve.
fn hessian_factors(
    p: &InnerProblem<'_>,
    loss: &LossEval,
    grad: &DMatrix<f64>,
    cfg: &InnerConfig,
) -> Result<KrylovFactors> {
    let (rows, cols) = grad.shape();
    let mut seed = as_vector(grad);
    if seed.norm() == 0.0 {
        seed = DVector::from_element(seed.len(), 1.0);
    }
    arnoldi(|v| as_vector(&p.hess_apply(loss, &as_matrix(v, rows, cols))), &seed, 0.0, cfg.r_max)
}

/// Dispatches on the loss kind. `warm` is ignored for least squares.
pub fn solve(p: &InnerProblem<'_>, warm: &DMatrix<f64>, cfg: &InnerConfig) -> Result<InnerSolution> {
    match p.loss {
        LossKind::LeastSquares => solve_ls(p),
        _ => solve_ce(p, warm, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            (-2.0 * (1.0 - a).ln()).sqrt() * (std::f64::consts::TAU * b).cos()
        })
    }

    #[test]
    fn ls_interpolates_identity_features() {
        let z = DMatrix::identity(2, 2);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let p = InnerProblem { z: &z, c: &c, loss: LossKind::LeastSquares, alpha2: 0.0 };
        let s = solve_ls(&p).unwrap();
        assert!((s.w.clone() - &c).norm() < 1e-14);

        // (1/2)(W − C) + 0.5 W = 0 ⇒ W = C/2.
        let p = InnerProblem { alpha2: 0.5, ..p };
        let s = solve_ls(&p).unwrap();
        assert!((s.w - &c * 0.5).norm() < 1e-14);
    }

    #[test]
    fn ls_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = gaussian(4, 32, &mut rng);
        let c = gaussian(3, 32, &mut rng);
        let alpha2 = 1e-3;
        let p = InnerProblem { z: &z, c: &c, loss: LossKind::LeastSquares, alpha2 };
        let w = solve_ls(&p).unwrap().w;
        let m = &z * z.transpose() / 32.0 + DMatrix::identity(4, 4) * alpha2;
        let rhs = &c * z.transpose() / 32.0;
        let oracle = m.clone().lu().solve(&rhs.transpose()).unwrap().transpose();
        assert!((&w - &oracle).norm() <= 1e-10 * oracle.norm());
        assert!((&w * &m - &rhs).norm() <= 1e-10 * rhs.norm());
    }

    #[test]
    fn ls_rejects_short_batches() {
        let z = DMatrix::zeros(3, 2);
        let c = DMatrix::zeros(1, 2);
        let p = InnerProblem { z: &z, c: &c, loss: LossKind::LeastSquares, alpha2: 1.0 };
        assert!(matches!(solve_ls(&p), Err(Error::UnsupportedShape(_))));
    }

    #[test]
    fn ce_stops_immediately_at_stationary_warm_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = gaussian(2, 20, &mut rng);
        let c = DMatrix::from_fn(1, 20, |_, j| f64::from(z[(0, j)] > 0.0));
        let p = InnerProblem { z: &z, c: &c, loss: LossKind::Logistic, alpha2: 1e-2 };
        let first = solve_ce(&p, &DMatrix::zeros(1, 2), &InnerConfig::default()).unwrap();
        assert!(first.converged);
        let again = solve_ce(&p, &first.w, &InnerConfig::default()).unwrap();
        assert_eq!(again.iterations, 0);
        assert_eq!(again.w, first.w);
    }

    /// Scalar logistic problem: the stationarity equation is solved by
    /// bisection to high precision and compared with the Newton result.
    #[test]
    fn ce_matches_bisection_on_scalar_logistic() {
        let z = DMatrix::from_row_slice(1, 6, &[-2.0, -1.0, -0.5, 0.5, 1.0, 2.0]);
        let c = DMatrix::from_row_slice(1, 6, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let alpha2 = 1e-2;
        let p = InnerProblem { z: &z, c: &c, loss: LossKind::Logistic, alpha2 };
        let s = solve_ce(&p, &DMatrix::zeros(1, 1), &InnerConfig::default()).unwrap();
        assert!(s.converged && s.grad_norm <= 1e-10);

        let dphi = |w: f64| {
            let g: f64 = (0..6)
                .map(|j| {
                    let h = 1.0 / (1.0 + (-w * z[(0, j)]).exp());
                    (h - c[(0, j)]) * z[(0, j)]
                })
                .sum();
            g / 6.0 + alpha2 * w
        };
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if dphi(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((s.w[(0, 0)] - 0.5 * (lo + hi)).abs() <= 1e-8);
    }

    #[test]
    fn ce_multinomial_beats_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = gaussian(4, 200, &mut rng);
        let mut c = DMatrix::zeros(3, 200);
        for j in 0..200 {
            c[(rng.random_range(0..3), j)] = 1.0;
        }
        let p = InnerProblem { z: &z, c: &c, loss: LossKind::Multinomial, alpha2: 1e-2 };
        let s = solve_ce(&p, &DMatrix::zeros(3, 4), &InnerConfig::default()).unwrap();
        assert!(s.converged && s.grad_norm <= 1e-10);
        for pair in s.history.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        assert!(s.max_step_ratio <= 1.0 + 1e-8);

        // Oracle: gradient descent with a fixed step until it stalls.
        let mut w = DMatrix::zeros(3, 4);
        let mut prev = f64::INFINITY;
        for _ in 0..200_000 {
            let (v, _, g) = p.evaluate(&w).unwrap();
            if v >= prev || g.norm() < 1e-13 {
                break;
            }
            prev = v;
            w -= g * 0.5;
        }
        let oracle = p.evaluate(&w).unwrap().0;
        assert!(s.value <= oracle + 1e-12, "{} vs {}", s.value, oracle);
    }

    #[test]
    fn ce_hessian_is_strictly_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = gaussian(3, 40, &mut rng);
        let mut c = DMatrix::zeros(4, 40);
        for j in 0..40 {
            c[(rng.random_range(0..4), j)] = 1.0;
        }
        let alpha2 = 0.05;
        let p = InnerProblem { z: &z, c: &c, loss: LossKind::Multinomial, alpha2 };
        let w = gaussian(4, 3, &mut rng);
        let (_, loss, _) = p.evaluate(&w).unwrap();
        for _ in 0..20 {
            let v = gaussian(4, 3, &mut rng);
            let hv = p.hess_apply(&loss, &v);
            assert!(crate::linalg::frob_dot(&v, &hv) >= alpha2 * v.norm_squared() * (1.0 - 1e-12));
        }
    }

    /// Along a sequence of slowly changing feature matrices, starting from the
    /// previous solution costs no more Newton iterations than starting at zero.
    #[test]
    fn warm_start_dominates_cold_start_in_median() {
        let mut diffs = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut z = gaussian(4, 60, &mut rng);
            let mut c = DMatrix::zeros(3, 60);
            for j in 0..60 {
                c[(rng.random_range(0..3), j)] = 1.0;
            }
            let mut prev = DMatrix::zeros(3, 4);
            let (mut warm, mut cold) = (0, 0);
            for _ in 0..8 {
                z += gaussian(4, 60, &mut rng) * 0.02;
                let p = InnerProblem { z: &z, c: &c, loss: LossKind::Multinomial, alpha2: 1e-2 };
                let w = solve_ce(&p, &prev, &InnerConfig::default()).unwrap();
                cold += solve_ce(&p, &DMatrix::zeros(3, 4), &InnerConfig::default()).unwrap().iterations;
                warm += w.iterations;
                prev = w.w;
            }
            diffs.push(warm as i64 - cold as i64);
        }
        diffs.sort();
        assert!(diffs[2] <= 0, "{diffs:?}");
    }
}
