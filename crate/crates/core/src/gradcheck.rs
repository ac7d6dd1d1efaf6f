//! Taylor tests of the reduced objective's gradient.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::reduced::{ModelObjective, Objective};

/// Errors of the zeroth- and first-order Taylor expansions along `dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub hs: Vec<f64>,
    /// `|Φ(θ + hδ) − Φ(θ)|`.
    pub err0: Vec<f64>,
    /// `|Φ(θ + hδ) − Φ(θ) − h ∇Φᵀδ|`.
    pub err1: Vec<f64>,
    /// Fitted log-log slope of `err1`.
    pub slope: f64,
}

/// `n` points spaced evenly in `log h` from `hi` down to `lo`.
pub fn h_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// Least-squares slope of `log err` against `log h`; zero errors are skipped.
pub fn fit_slope(hs: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = hs.iter().zip(errs).filter(|(_, &e)| e > 0.0).map(|(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    num / den
}

/// Taylor test of `obj` at `x` along `dir`. Every evaluation runs a fresh
/// inner solve from `obj`'s warm start.
pub fn taylor_test(obj: &mut ModelObjective, x: &DVector<f64>, dir: &DVector<f64>, hs: &[f64]) -> Result<TaylorReport> {
    if dir.len() != x.len() || x.len() != obj.dim() {
        return Err(Error::ShapeMismatch("Taylor test direction does not match the objective".into()));
    }
    let mut base = obj.evaluate(x)?;
    let g = obj.gradient(&mut base.state)?;
    let gd = g.dot(dir);
    let mut err0 = Vec::with_capacity(hs.len());
    let mut err1 = Vec::with_capacity(hs.len());
    for &h in hs {
        let v = obj.evaluate(&(x + dir * h))?.value;
        err0.push((v - base.value).abs());
        err1.push((v - base.value - h * gd).abs());
    }
    let slope = fit_slope(hs, &err1);
    Ok(TaylorReport { hs: hs.to_vec(), err0, err1, slope })
}
