//! L-BFGS with a strong-Wolfe line search.

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{stagnation_floor, LedgerRow, RunContext, RunOutcome, Status};
use crate::error::{Error, Result};
use crate::reduced::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Trial points per line search.
    pub max_evals: usize,
    pub max_iter: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, c1: 1e-4, c2: 0.9, max_evals: 20, max_iter: 100_000 }
    }
}

/// Curvature pairs with `sᵀy` at or below this are dropped.
const CURVATURE_FLOOR: f64 = 1e-12;

/// A line-search point with value, directional derivative and gradient.
struct Probe<S> {
    alpha: f64,
    value: f64,
    slope: f64,
    grad: DVector<f64>,
    state: S,
}

struct LineSearch<'c> {
    cfg: &'c LbfgsConfig,
    f0: f64,
    slope0: f64,
    evals: usize,
}

impl LineSearch<'_> {
    /// Evaluates `φ(α)`; `None` when the value is not finite.
    fn probe<O: Objective>(
        &mut self,
        obj: &mut O,
        x: &DVector<f64>,
        d: &DVector<f64>,
        alpha: f64,
    ) -> Result<Option<Probe<O::State>>> {
        self.evals += 1;
        let mut e = match obj.evaluate(&(x + d * alpha)) {
            Ok(e) if e.value.is_finite() => e,
            Ok(_) | Err(Error::DivergedForward { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let grad = obj.gradient(&mut e.state)?;
        Ok(Some(Probe { alpha, value: e.value, slope: grad.dot(d), grad, state: e.state }))
    }

    fn armijo(&self, p: &Probe<impl Sized>) -> bool {
        p.value <= self.f0 + self.cfg.c1 * p.alpha * self.slope0
    }

    fn curvature(&self, p: &Probe<impl Sized>) -> bool {
        p.slope.abs() <= -self.cfg.c2 * self.slope0
    }

    /// Bracketing phase; returns a strong-Wolfe point, or the best
    /// sufficient-decrease point when the evaluation limit is hit.
    fn run<O: Objective>(
        &mut self,
        obj: &mut O,
        x: &DVector<f64>,
        d: &DVector<f64>,
        alpha0: f64,
    ) -> Result<Option<Probe<O::State>>> {
        let mut prev: Option<Probe<O::State>> = None;
        let mut alpha = alpha0;
        while self.evals < self.cfg.max_evals {
            let p = self.probe(obj, x, d, alpha)?;
            let Some(p) = p else {
                return self.zoom(obj, x, d, prev, Bound::Alpha(alpha));
            };
            let prev_value = prev.as_ref().map_or(self.f0, |q| q.value);
            if !self.armijo(&p) || (prev.is_some() && p.value >= prev_value) {
                return self.zoom(obj, x, d, prev, Bound::Probe(p));
            }
            if self.curvature(&p) {
                return Ok(Some(p));
            }
            if p.slope >= 0.0 {
                let hi = match prev {
                    Some(q) => Bound::Probe(q),
                    None => Bound::Alpha(0.0),
                };
                return self.zoom(obj, x, d, Some(p), hi);
            }
            alpha *= 2.0;
            prev = Some(p);
        }
        Ok(prev)
    }

    /// `lo` satisfies sufficient decrease; `hi` does not, or has a slope
    /// pointing back at `lo`.
    fn zoom<O: Objective>(
        &mut self,
        obj: &mut O,
        x: &DVector<f64>,
        d: &DVector<f64>,
        mut lo: Option<Probe<O::State>>,
        mut hi: Bound<O::State>,
    ) -> Result<Option<Probe<O::State>>> {
        while self.evals < self.cfg.max_evals {
            let (a_lo, f_lo, s_lo) = lo.as_ref().map_or((0.0, self.f0, self.slope0), |p| (p.alpha, p.value, p.slope));
            let a_hi = hi.alpha();
            let width = (a_hi - a_lo).abs();
            if width <= 1e-14 * a_hi.abs().max(1e-300) {
                break;
            }
            let mut a = match &hi {
                Bound::Probe(p) => cubic_min(a_lo, f_lo, s_lo, p.alpha, p.value, p.slope),
                Bound::Alpha(_) => None,
            }
            .unwrap_or(0.5 * (a_lo + a_hi));
            let (left, right) = (a_lo.min(a_hi), a_lo.max(a_hi));
            a = a.clamp(left + 0.1 * width, right - 0.1 * width);
            let Some(p) = self.probe(obj, x, d, a)? else {
                hi = Bound::Alpha(a);
                continue;
            };
            if !self.armijo(&p) || p.value >= f_lo {
                hi = Bound::Probe(p);
            } else {
                if self.curvature(&p) {
                    return Ok(Some(p));
                }
                if p.slope * (a_hi - a_lo) >= 0.0 {
                    hi = match lo.take() {
                        Some(q) => Bound::Probe(q),
                        None => Bound::Alpha(0.0),
                    };
                }
                lo = Some(p);
            }
        }
        Ok(lo)
    }
}

enum Bound<S> {
    Probe(Probe<S>),
    /// A step known only by its length: the origin, or a non-finite value.
    Alpha(f64),
}

impl<S> Bound<S> {
    fn alpha(&self) -> f64 {
        match self {
            Bound::Probe(p) => p.alpha,
            Bound::Alpha(a) => *a,
        }
    }
}

/// Minimizer of the cubic interpolating values and slopes at `a` and `b`.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    t.is_finite().then_some(t)
}

/// Two-loop recursion: `−H g` from the stored pairs.
fn two_loop(pairs: &VecDeque<(DVector<f64>, DVector<f64>, f64)>, g: &DVector<f64>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

/// L-BFGS from `x0`; every line-search trial costs a value and a gradient.
pub fn run_lbfgs<O: Objective>(
    obj: &mut O,
    x0: &DVector<f64>,
    cfg: &LbfgsConfig,
    stagnation_stop: bool,
    ctx: &mut RunContext<'_>,
) -> Result<RunOutcome> {
    let mut x = x0.clone();
    let mut cur = obj.evaluate(&x)?;
    if !cur.value.is_finite() {
        return Err(Error::InvalidInput("objective is not finite at the starting point".into()));
    }
    obj.accept(&cur.state);
    let mut g = obj.gradient(&mut cur.state)?;
    let (mut f, mut state) = (cur.value, cur.state);
    let g0 = g.norm();
    ctx.record(obj, &state, LedgerRow { iter: 0, objective: f, ..Default::default() });

    let mut pairs: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut iter = 0;
    let status = loop {
        let gn = g.norm();
        if gn == 0.0 || (stagnation_stop && gn <= stagnation_floor(g0)) {
            break Status::Converged;
        }
        if ctx.exhausted(obj) {
            break Status::Budget;
        }
        if iter >= cfg.max_iter {
            break Status::MaxIter;
        }
        iter += 1;

        let mut found = None;
        let mut evaluations = 0;
        for attempt in 0..2 {
            let steepest = attempt == 1 || pairs.is_empty();
            let mut d = if steepest { -&g } else { two_loop(&pairs, &g) };
            let mut slope = g.dot(&d);
            if slope >= 0.0 {
                d = -&g;
                slope = -gn * gn;
            }
            let alpha0 = if pairs.is_empty() || steepest { (1.0 / d.norm()).min(1.0) } else { 1.0 };
            let mut ls = LineSearch { cfg, f0: f, slope0: slope, evals: 0 };
            let p = ls.run(obj, &x, &d, alpha0)?;
            evaluations += ls.evals;
            if let Some(p) = p.filter(|p| p.value < f) {
                found = Some((p, d));
                break;
            }
            pairs.clear();
            if steepest {
                break;
            }
        }
        let Some((p, d)) = found else {
            ctx.record(obj, &state, LedgerRow { iter, objective: f, evaluations, ..Default::default() });
            break Status::Stalled;
        };
        let s = &d * p.alpha;
        let y = &p.grad - &g;
        let sy = s.dot(&y);
        if sy > CURVATURE_FLOOR {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        }
        let reduction = f - p.value;
        x += &s;
        obj.accept(&p.state);
        f = p.value;
        g = p.grad;
        state = p.state;
        ctx.record(
            obj,
            &state,
            LedgerRow {
                iter,
                objective: f,
                step_norm: Some(s.norm()),
                actual_reduction: Some(reduction),
                evaluations,
                ..Default::default()
            },
        );
    };
    Ok(RunOutcome { x, status, iterations: iter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::gn::tests::Quadratic;
    use crate::optim::RunLedger;

    #[test]
    fn quadratic_converges_superlinearly() {
        let mut q = Quadratic::random(8, 4);
        let oracle = q.solution();
        let mut ledger = RunLedger::new(1);
        let mut ctx = RunContext::new(&mut ledger, 0, &q, 1e6);
        let cfg = LbfgsConfig { max_iter: 24, ..Default::default() };
        let out = run_lbfgs(&mut q, &DVector::zeros(8), &cfg, false, &mut ctx).unwrap();
        assert!(out.iterations <= 24, "{} iterations", out.iterations);
        let g = q.a.transpose() * (&q.a * &out.x - &q.b);
        assert!(g.norm() <= 1e-8, "{}", g.norm());
        assert!((&out.x - oracle).norm() < 1e-6);
    }

    #[test]
    fn every_step_decreases_and_is_charged() {
        let mut q = Quadratic::random(12, 5);
        let mut ledger = RunLedger::new(1);
        let mut ctx = RunContext::new(&mut ledger, 0, &q, 40.0);
        run_lbfgs(&mut q, &DVector::zeros(12), &LbfgsConfig { memory: 3, ..Default::default() }, true, &mut ctx)
            .unwrap();
        for pair in ledger.rows.windows(2) {
            assert!(pair[1].objective < pair[0].objective);
            assert_eq!(pair[1].passes - pair[0].passes, 2 * pair[1].evaluations as u64);
        }
        assert_eq!(ledger.total_passes(), q.passes);
    }

    #[test]
    fn two_loop_skips_nothing_when_empty() {
        let g = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(two_loop(&VecDeque::new(), &g), -g);
    }

    #[test]
    fn cubic_interpolation_finds_quadratic_minimum() {
        // φ(α) = (α − 1)²: φ(0) = 1, φ'(0) = −2, φ(3) = 4, φ'(3) = 4.
        let t = cubic_min(0.0, 1.0, -2.0, 3.0, 4.0, 4.0).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
    }
}
