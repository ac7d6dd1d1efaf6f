//! Single-level runs and the shallow-to-deep multilevel driver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    run_gn_tr, run_lbfgs, run_sgd, Method, OptimizerConfig, RunContext, RunLedger, RunOutcome, SgdMethod, Status,
};
use crate::error::{Error, Result};
use crate::features::{prolongate, ArchSpec, Network};
use crate::inner::InnerConfig;
use crate::loss::LossKind;
use crate::reduced::{Formulation, ModelObjective};
use crate::regularizer::{RegWeights, Regularizer};

/// Depths `d` of a shallow-to-deep hierarchy with a work-unit budget each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSchedule {
    pub depths: Vec<usize>,
    pub budgets: Vec<f64>,
}

impl LevelSchedule {
    /// `depths` sharing `total` work units equally.
    pub fn even(depths: Vec<usize>, total: f64) -> Self {
        let each = total / depths.len().max(1) as f64;
        let budgets = vec![each; depths.len()];
        Self { depths, budgets }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.len() != self.budgets.len() {
            return Err(Error::Config("level schedule needs one budget per depth".into()));
        }
        if self.depths[0] == 0 {
            return Err(Error::Config("depths must be positive".into()));
        }
        for pair in self.depths.windows(2) {
            if pair[1] != 2 * pair[0] {
                return Err(Error::UnsupportedRefinement { from: pair[0], to: pair[1] });
            }
        }
        if self.budgets.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Config("level budgets must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything but the optimizer: data, architecture, loss and regularization.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub arch: ArchSpec,
    pub loss: LossKind,
    pub reg: RegWeights,
    pub inner: InnerConfig,
    pub train: (DMatrix<f64>, DMatrix<f64>),
    pub validation: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl ProblemSpec {
    pub fn objective(&self, arch: &ArchSpec, formulation: Formulation) -> Result<ModelObjective> {
        let net = Network::new(arch.clone())?;
        let reg = Regularizer::new(arch, self.reg)?;
        let obj = ModelObjective::new(
            net,
            self.train.0.clone(),
            self.train.1.clone(),
            self.loss,
            reg,
            formulation,
            self.inner,
        )?;
        match &self.validation {
            Some((y, c)) if y.ncols() > 0 => obj.with_validation(y.clone(), c.clone()),
            _ => Ok(obj),
        }
    }
}

/// Result of a (possibly multilevel) run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub label: String,
    /// Architecture of the final level.
    pub arch: ArchSpec,
    pub theta: DVector<f64>,
    pub w: DMatrix<f64>,
    pub ledger: RunLedger,
    pub status: Status,
}

fn run_level(
    obj: &mut ModelObjective,
    x0: &DVector<f64>,
    cfg: &OptimizerConfig,
    seed: u64,
    ctx: &mut RunContext<'_>,
) -> Result<RunOutcome> {
    match cfg.method {
        Method::GnTr => run_gn_tr(obj, x0, &cfg.gn, cfg.stagnation_stop, ctx),
        Method::Lbfgs => run_lbfgs(obj, x0, &cfg.lbfgs, cfg.stagnation_stop, ctx),
        Method::Adam => run_sgd(obj, x0, SgdMethod::Adam, &cfg.sgd, seed, ctx),
        Method::SgdNesterov => run_sgd(obj, x0, SgdMethod::Nesterov, &cfg.sgd, seed, ctx),
    }
}

/// One optimizer run on `spec.arch` from `theta0`.
pub fn run_single(spec: &ProblemSpec, cfg: &OptimizerConfig, theta0: &DVector<f64>, seed: u64) -> Result<RunResult> {
    let depth = spec.arch.cells();
    let schedule = LevelSchedule { depths: vec![depth.unwrap_or(1)], budgets: vec![cfg.budget] };
    run_levels(spec, &schedule, cfg, theta0, seed, depth.is_some())
}

/// Optimizes on each depth of `schedule` in turn, prolongating `θ` between
/// levels. `theta0` belongs to the first depth. Full-path methods carry `W`
/// across levels; reduced methods re-solve it. The first `W` always comes
/// from an inner solve.
pub fn run_multilevel(
    spec: &ProblemSpec,
    schedule: &LevelSchedule,
    cfg: &OptimizerConfig,
    theta0: &DVector<f64>,
    seed: u64,
) -> Result<RunResult> {
    if spec.arch.cells().is_none() {
        return Err(Error::Config("multilevel training needs a neural ODE".into()));
    }
    run_levels(spec, schedule, cfg, theta0, seed, true)
}

fn run_levels(
    spec: &ProblemSpec,
    schedule: &LevelSchedule,
    cfg: &OptimizerConfig,
    theta0: &DVector<f64>,
    seed: u64,
    resize: bool,
) -> Result<RunResult> {
    schedule.validate()?;
    cfg.validate()?;
    let formulation = cfg.effective_formulation();
    let mut ledger = RunLedger::new(spec.train.0.ncols());
    let mut theta = theta0.clone();
    let mut w: Option<DMatrix<f64>> = None;
    let mut arch = spec.arch.clone();
    let mut status = Status::Budget;
    for (level, (&d, &budget)) in schedule.depths.iter().zip(&schedule.budgets).enumerate() {
        if resize {
            let next = spec.arch.with_cells(d)?;
            if level > 0 {
                let from = arch.cells().expect("neural ODE");
                theta = prolongate(&arch, &theta, from, d)?;
            }
            arch = next;
        }
        if theta.len() != arch.layout().len() {
            return Err(Error::Mismatch(format!(
                "initial weights of length {} for an architecture with {} weights",
                theta.len(),
                arch.layout().len()
            )));
        }
        let mut obj = spec.objective(&arch, formulation)?;
        let w0 = match &w {
            Some(w) => w.clone(),
            None => obj.solve_w(&theta)?,
        };
        obj.warm = w0.clone();
        let x0 = obj.pack(&w0, &theta);
        let mut ctx = RunContext::new(&mut ledger, level, &obj, budget);
        let out = run_level(&mut obj, &x0, cfg, seed.wrapping_add(level as u64), &mut ctx)?;
        status = out.status;
        let (w_full, t) = obj.unpack(&out.x);
        theta = t;
        w = Some(match formulation {
            Formulation::Full => w_full.expect("full formulation"),
            Formulation::Reduced => obj.warm.clone(),
        });
        if matches!(status, Status::Stalled | Status::Diverged) {
            break;
        }
    }
    Ok(RunResult { label: cfg.label(), arch, theta, w: w.expect("at least one level"), ledger, status })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_ellipse, EllipseSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(cells: usize) -> ProblemSpec {
        let d = gen_ellipse(60, 0, &EllipseSpec::default()).unwrap();
        ProblemSpec {
            arch: ArchSpec::NeuralOde { n_in: 2, width: 3, final_time: 1.0, cells, gamma: 1e-4 },
            loss: LossKind::Logistic,
            reg: RegWeights { alpha1: 1e-3, alpha2: 1e-3 },
            inner: InnerConfig::default(),
            train: (d.y, d.c),
            validation: None,
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(LevelSchedule::even(vec![2, 4, 8], 30.0).validate().is_ok());
        assert!(matches!(
            LevelSchedule::even(vec![2, 6], 30.0).validate(),
            Err(Error::UnsupportedRefinement { from: 2, to: 6 })
        ));
    }

    #[test]
    fn single_level_schedule_matches_bare_run() {
        let s = spec(2);
        let theta0 = s.arch.init_weights(&mut ChaCha8Rng::seed_from_u64(1));
        let cfg = OptimizerConfig { budget: 20.0, ..Default::default() };
        let bare = run_single(&s, &cfg, &theta0, 0).unwrap();
        let ml = run_multilevel(&s, &LevelSchedule { depths: vec![2], budgets: vec![20.0] }, &cfg, &theta0, 0).unwrap();
        assert_eq!(bare.ledger, ml.ledger);
        assert_eq!(bare.theta, ml.theta);
    }

    #[test]
    fn three_levels_leave_two_boundaries() {
        let s = spec(2);
        let theta0 = s.arch.init_weights(&mut ChaCha8Rng::seed_from_u64(2));
        for method in [Method::GnTr, Method::Lbfgs, Method::Adam] {
            let cfg = OptimizerConfig { method, stagnation_stop: false, ..Default::default() };
            let r = run_multilevel(&s, &LevelSchedule::even(vec![2, 4, 8], 15.0), &cfg, &theta0, 0).unwrap();
            assert_eq!(r.ledger.level_boundaries().len(), 2, "{method:?}");
            assert_eq!(r.arch.cells(), Some(8));
            let wu: Vec<f64> = r.ledger.rows.iter().map(|row| r.ledger.work_units(row.passes)).collect();
            assert!(wu.windows(2).all(|p| p[1] >= p[0]));
        }
    }

    /// Prolongating a trained coarse network keeps the fine-level starting
    /// loss close to the coarse final loss.
    #[test]
    fn prolongation_preserves_loss() {
        use crate::data::{gen_synthetic_regression, TeacherSpec};
        let mut ratios = Vec::new();
        for seed in 0..3 {
            let d = gen_synthetic_regression(120, 2, 2, &TeacherSpec::default(), seed).unwrap();
            let s = ProblemSpec {
                arch: ArchSpec::NeuralOde { n_in: 2, width: 4, final_time: 2.0, cells: 2, gamma: 1e-4 },
                loss: LossKind::LeastSquares,
                reg: RegWeights { alpha1: 1e-6, alpha2: 1e-6 },
                inner: InnerConfig::default(),
                train: (d.y, d.c),
                validation: None,
            };
            let theta0 = s.arch.init_weights(&mut ChaCha8Rng::seed_from_u64(seed));
            let cfg = OptimizerConfig { budget: 100.0, stagnation_stop: false, ..Default::default() };
            let coarse = run_single(&s, &cfg, &theta0, seed).unwrap();
            let coarse_loss = coarse.ledger.last().unwrap().metrics.train_loss;
            let fine_theta = prolongate(&coarse.arch, &coarse.theta, 2, 4).unwrap();
            let fine = s.objective(&s.arch.with_cells(4).unwrap(), Formulation::Reduced).unwrap();
            let w = fine.solve_w(&fine_theta).unwrap();
            let (fine_loss, _) = fine.score(&w, &fine_theta, &s.train.0, &s.train.1).unwrap();
            ratios.push((fine_loss - coarse_loss).abs() / coarse_loss);
        }
        ratios.sort_by(f64::total_cmp);
        assert!(ratios[1] <= 0.25, "{ratios:?}");
    }
}
