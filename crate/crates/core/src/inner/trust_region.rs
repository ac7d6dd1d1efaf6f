use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{HessenbergLsq, KrylovFactors, Vector};

/// Trust-region management constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrustRegionParams {
    /// Initial radius.
    pub delta0: f64,
    /// Accept a trial point when actual/predicted reduction exceeds this.
    pub eta_accept: f64,
    /// Expand when the ratio exceeds this and the step reached the boundary.
    pub eta_expand: f64,
    pub expand: f64,
    pub shrink: f64,
    pub max_iter: usize,
}

impl Default for TrustRegionParams {
    fn default() -> Self {
        Self { delta0: 1.0, eta_accept: 0.1, eta_expand: 0.75, expand: 2.0, shrink: 0.5, max_iter: 100 }
    }
}

impl TrustRegionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_accept > 0.0 && self.eta_accept < 1.0) {
            return Err(Error::InvalidInput(format!("eta_accept {} not in (0, 1)", self.eta_accept)));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0 && self.expand > 1.0) {
            return Err(Error::InvalidInput("need 0 < shrink < 1 < expand".into()));
        }
        if !(self.delta0 > 0.0) {
            return Err(Error::InvalidInput("initial radius must be positive".into()));
        }
        Ok(())
    }

    /// New radius after a trial with reduction ratio `rho` and step norm `step`.
    pub fn update(&self, delta: f64, rho: f64, step: f64, accepted: bool) -> f64 {
        if !accepted {
            delta * self.shrink
        } else if rho > self.eta_expand && step >= 0.99 * delta {
            delta * self.expand
        } else {
            delta
        }
    }
}

const LAMBDA_RTOL: f64 = 1e-12;
const LAMBDA_MAX_ITER: usize = 300;

/// Smallest `λ ≥ 0` with `‖z*(λ)‖ ≤ Δ`, and the corresponding `z*(λ)`.
///
/// The map `λ ↦ ‖z*(λ)‖` is monotone; the root of `1/‖z*(λ)‖ − 1/Δ` is found
/// by Newton steps safeguarded with bisection, starting from the bracket
/// `[0, β/Δ]`, which is doubled until it contains the root.
pub fn lambda_search(sys: &HessenbergLsq, beta: f64, delta: f64) -> Result<(f64, Vector)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("radius must be positive, got {delta}")));
    }
    if sys.norm(0.0) <= delta {
        return Ok((0.0, sys.solve(0.0).z));
    }
    let mut lo = 0.0;
    let mut hi = beta / delta;
    let cap = 2f64.powi(64) * beta / delta;
    while sys.norm(hi) > delta {
        lo = hi;
        hi *= 2.0;
        if hi > cap || !hi.is_finite() {
            return Err(Error::LambdaSearch { upper: hi });
        }
    }
    let mut lam = hi;
    for _ in 0..LAMBDA_MAX_ITER {
        let n = sys.norm(lam);
        if (n - delta).abs() <= LAMBDA_RTOL * delta {
            break;
        }
        if n > delta {
            lo = lam;
        } else {
            hi = lam;
        }
        if hi - lo <= 1e-15 * hi {
            lam = hi;
            break;
        }
        // Newton on φ(λ) = 1/‖z‖ − 1/Δ: φ' = −‖z‖'/‖z‖².
        let dn = sys.norm_derivative(lam);
        let phi = 1.0 / n - 1.0 / delta;
        let dphi = -dn / (n * n);
        let newton = lam - phi / dphi;
        lam = if dphi > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok((lam, sys.solve(lam).z))
}

/// [`lambda_search`] on the projected problem of a Krylov factorization.
pub fn tr_lambda_search(factors: &KrylovFactors, delta: f64) -> Result<(f64, Vector)> {
    let sys = HessenbergLsq::new(&factors.h, factors.beta)?;
    lambda_search(&sys, factors.beta, delta)
}

/// Trust-region step computed in a Krylov subspace of the curvature operator
/// `M` seeded by the gradient `g`: `δ = −Q_r z` with `z = z*(λ)`.
#[derive(Debug, Clone)]
pub struct KrylovStep {
    /// Step in the original space, `−Q_r z`.
    pub step: Vector,
    pub lambda: f64,
    pub norm: f64,
    /// `−(gᵀδ + ½ δᵀ M δ)`.
    pub predicted: f64,
    /// `|‖z‖ − Δ| / Δ` when the radius was active.
    pub radius_error: Option<f64>,
}

/// Projected quadratic model reused across radius changes.
#[derive(Debug, Clone)]
pub struct KrylovModel {
    pub factors: KrylovFactors,
    sys: HessenbergLsq,
}

impl KrylovModel {
    pub fn new(factors: KrylovFactors) -> Result<Self> {
        let sys = HessenbergLsq::new(&factors.h, factors.beta)?;
        Ok(Self { factors, sys })
    }

    pub fn step(&self, delta: f64) -> Result<KrylovStep> {
        let (lambda, z) = lambda_search(&self.sys, self.factors.beta, delta)?;
        let r = self.factors.rank;
        let hz = &self.factors.h * &z;
        // δᵀMδ = zᵀ Q_rᵀ Q_{r+1} H z = zᵀ (H z)[..r].
        let curv = z.dot(&hz.rows(0, r));
        let predicted = self.factors.beta * z[0] - 0.5 * curv;
        let norm = z.norm();
        let radius_error = (lambda > 0.0).then(|| (norm - delta).abs() / delta);
        Ok(KrylovStep { step: -self.factors.lift(&z), lambda, norm, predicted, radius_error })
    }
}
