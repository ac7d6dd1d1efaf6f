//! Gauss-Newton-Krylov trust region.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{stagnation_floor, LedgerRow, RunContext, RunOutcome, Status};
use crate::error::{Error, Result};
use crate::inner::{KrylovModel, TrustRegionParams};
use crate::linalg::arnoldi;
use crate::reduced::{Evaluated, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnConfig {
    pub r_max: usize,
    /// Relative residual at which the Krylov build stops.
    pub krylov_tol: f64,
    pub trust_region: TrustRegionParams,
    pub max_iter: usize,
}

impl Default for GnConfig {
    fn default() -> Self {
        Self { r_max: 20, krylov_tol: 1e-2, trust_region: TrustRegionParams::default(), max_iter: 100_000 }
    }
}

/// Consecutive rejections below [`TINY_RADIUS`] that end a run.
const STALL_REJECTIONS: usize = 5;
const TINY_RADIUS: f64 = 1e-12;

/// Trial evaluation; a diverged forward pass counts as an infinite value.
fn try_evaluate<O: Objective>(obj: &mut O, x: &DVector<f64>) -> Result<Option<Evaluated<O::State>>> {
    match obj.evaluate(x) {
        Ok(e) if e.value.is_finite() => Ok(Some(e)),
        Ok(_) | Err(Error::DivergedForward { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Minimizes `obj` from `x0`. Each iteration charges one backward pass for
/// the gradient, `r` Gauss-Newton products for a rank-`r` Krylov basis and one
/// forward pass per trial point.
pub fn run_gn_tr<O: Objective>(
    obj: &mut O,
    x0: &DVector<f64>,
    cfg: &GnConfig,
    stagnation_stop: bool,
    ctx: &mut RunContext<'_>,
) -> Result<RunOutcome> {
    let tr = &cfg.trust_region;
    tr.validate()?;
    let mut x = x0.clone();
    let mut delta = tr.delta0;
    let Some(mut cur) = try_evaluate(obj, &x)? else {
        return Err(Error::InvalidInput("objective is not finite at the starting point".into()));
    };
    obj.accept(&cur.state);
    let mut g = obj.gradient(&mut cur.state)?;
    let g0 = g.norm();
    ctx.record(obj, &cur.state, LedgerRow { iter: 0, objective: cur.value, delta: Some(delta), ..Default::default() });

    let mut iter = 0;
    let mut tiny_rejections = 0;
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

        let mut failure = None;
        let factors = arnoldi(
            |v| match obj.gn_apply(&cur.state, v) {
                Ok(mv) => mv,
                Err(e) => {
                    failure.get_or_insert(e);
                    DVector::zeros(v.len())
                }
            },
            &g,
            cfg.krylov_tol,
            cfg.r_max,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        let rank = factors.rank;
        let model = KrylovModel::new(factors)?;

        let mut rejected = 0;
        let accepted = loop {
            let step = model.step(delta)?;
            let trial = try_evaluate(obj, &(&x + &step.step))?;
            let ok = trial.as_ref().map(|t| {
                let actual = cur.value - t.value;
                let rho = actual / step.predicted;
                (actual, rho, step.predicted > 0.0 && actual > 0.0 && rho > tr.eta_accept)
            });
            match (trial, ok) {
                (Some(t), Some((actual, rho, true))) => break Some((t, step, actual, rho)),
                _ => {
                    rejected += 1;
                    delta *= tr.shrink;
                    if delta < TINY_RADIUS {
                        tiny_rejections += 1;
                        if tiny_rejections >= STALL_REJECTIONS {
                            break None;
                        }
                    }
                    if ctx.exhausted(obj) {
                        break None;
                    }
                }
            }
        };
        let Some((mut t, step, actual, rho)) = accepted else {
            ctx.record(
                obj,
                &cur.state,
                LedgerRow {
                    iter,
                    objective: cur.value,
                    delta: Some(delta),
                    rank: Some(rank),
                    rejected,
                    ..Default::default()
                },
            );
            break if tiny_rejections >= STALL_REJECTIONS { Status::Stalled } else { Status::Budget };
        };
        tiny_rejections = 0;
        let radius = delta;
        delta = if t.degraded { delta * tr.shrink } else { tr.update(delta, rho, step.norm, true) };
        x += &step.step;
        obj.accept(&t.state);
        g = obj.gradient(&mut t.state)?;
        cur = t;
        ctx.record(
            obj,
            &cur.state,
            LedgerRow {
                iter,
                objective: cur.value,
                delta: Some(delta),
                step_norm: Some(step.norm),
                radius: Some(radius),
                actual_reduction: Some(actual),
                lambda_error: step.radius_error,
                rank: Some(rank),
                rejected,
                ..Default::default()
            },
        );
    };
    Ok(RunOutcome { x, status, iterations: iter })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::optim::RunLedger;
    use crate::reduced::Metrics;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `½‖A x − b‖²` with manual pass accounting (one pass per product).
    pub(crate) struct Quadratic {
        pub a: DMatrix<f64>,
        pub b: DVector<f64>,
        pub passes: u64,
        pub evaluations: usize,
    }

    impl Quadratic {
        pub fn random(n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = DMatrix::from_fn(n + 3, n, |_, _| rng.random_range(-0.3..0.3));
            for i in 0..n {
                a[(i, i)] += 2.0;
            }
            let b = DVector::from_fn(n + 3, |_, _| rng.random_range(-1.0..1.0));
            Self { a, b, passes: 0, evaluations: 0 }
        }

        pub fn solution(&self) -> DVector<f64> {
            (self.a.transpose() * &self.a).lu().solve(&(self.a.transpose() * &self.b)).unwrap()
        }
    }

    impl Objective for Quadratic {
        type State = DVector<f64>;

        fn dim(&self) -> usize {
            self.a.ncols()
        }

        fn passes(&self) -> u64 {
            self.passes
        }

        fn n_train(&self) -> usize {
            1
        }

        fn evaluate(&mut self, x: &DVector<f64>) -> Result<Evaluated<DVector<f64>>> {
            self.passes += 1;
            self.evaluations += 1;
            let r = &self.a * x - &self.b;
            Ok(Evaluated { value: 0.5 * r.norm_squared(), degraded: false, state: x.clone() })
        }

        fn gradient(&mut self, s: &mut DVector<f64>) -> Result<DVector<f64>> {
            self.passes += 1;
            Ok(self.a.transpose() * (&self.a * &*s - &self.b))
        }

        fn gn_apply(&mut self, _s: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
            self.passes += 2;
            Ok(self.a.transpose() * (&self.a * v))
        }

        fn metrics(&self, s: &DVector<f64>) -> Metrics {
            Metrics { train_loss: 0.5 * (&self.a * s - &self.b).norm_squared(), ..Default::default() }
        }
    }

    #[test]
    fn quadratic_converges_to_least_squares_solution() {
        let mut q = Quadratic::random(6, 0);
        let oracle = q.solution();
        let cfg = GnConfig {
            krylov_tol: 1e-12,
            trust_region: TrustRegionParams { delta0: 100.0, ..Default::default() },
            ..Default::default()
        };
        let mut ledger = RunLedger::new(1);
        let mut ctx = RunContext::new(&mut ledger, 0, &q, 1e6);
        let out = run_gn_tr(&mut q, &DVector::zeros(6), &cfg, true, &mut ctx).unwrap();
        assert_eq!(out.status, Status::Converged);
        assert!(out.iterations <= 6);
        let g = q.a.transpose() * (&q.a * &out.x - &q.b);
        assert!(g.norm() <= 1e-8);
        assert!((&out.x - &oracle).norm() <= 1e-8 * oracle.norm());
    }

    #[test]
    fn zero_gradient_start_takes_no_iterations() {
        let mut q = Quadratic::random(4, 1);
        let x = q.solution();
        q.b = &q.a * &x;
        let mut ledger = RunLedger::new(1);
        let mut ctx = RunContext::new(&mut ledger, 0, &q, 100.0);
        let out = run_gn_tr(&mut q, &x, &GnConfig::default(), false, &mut ctx).unwrap();
        assert_eq!(out.iterations, 0);
        assert_eq!(ledger.rows.len(), 1);
    }

    #[test]
    fn charges_two_plus_two_r_per_accepted_iteration() {
        let mut q = Quadratic::random(8, 2);
        let cfg = GnConfig { r_max: 3, krylov_tol: 0.0, ..Default::default() };
        let mut ledger = RunLedger::new(1);
        let mut ctx = RunContext::new(&mut ledger, 0, &q, 60.0);
        run_gn_tr(&mut q, &DVector::zeros(8), &cfg, true, &mut ctx).unwrap();
        assert_eq!(ledger.rows[0].passes, 2);
        for pair in ledger.rows.windows(2) {
            let r = pair[1].rank.unwrap() as u64;
            let expected = if pair[1].step_norm.is_some() { 2 + 2 * r } else { 2 * r };
            assert_eq!(pair[1].passes - pair[0].passes, expected + pair[1].rejected as u64);
        }
        assert_eq!(ledger.total_passes(), q.passes);
    }

    #[test]
    fn accepted_steps_respect_radius_and_decrease() {
        let mut q = Quadratic::random(10, 3);
        let cfg = GnConfig {
            r_max: 2,
            trust_region: TrustRegionParams { delta0: 0.05, ..Default::default() },
            ..Default::default()
        };
        let mut ledger = RunLedger::new(1);
        let mut ctx = RunContext::new(&mut ledger, 0, &q, 200.0);
        run_gn_tr(&mut q, &DVector::zeros(10), &cfg, true, &mut ctx).unwrap();
        let mut prev = f64::INFINITY;
        for row in &ledger.rows {
            if let (Some(s), Some(r)) = (row.step_norm, row.radius) {
                assert!(s <= r * (1.0 + 1e-8));
                assert!(row.actual_reduction.unwrap() > 0.0);
            }
            if let Some(e) = row.lambda_error {
                assert!(e <= 1e-8);
            }
            assert!(row.objective <= prev);
            prev = row.objective;
        }
    }
}
