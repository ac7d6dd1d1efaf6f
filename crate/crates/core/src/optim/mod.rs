//! Outer optimizers, the multilevel driver and work-unit accounting.

mod gn;
mod lbfgs;
mod ledger;
mod multilevel;
mod sgd;

pub use gn::{run_gn_tr, GnConfig};
pub use lbfgs::{run_lbfgs, LbfgsConfig};
pub use ledger::{LedgerRow, RunLedger, LEDGER_HEADER};
pub use multilevel::{run_multilevel, run_single, LevelSchedule, ProblemSpec, RunResult};
pub use sgd::{run_sgd, SgdConfig, SgdMethod};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduced::{Formulation, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GnTr,
    Lbfgs,
    Adam,
    SgdNesterov,
}

/// One optimizer arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Display name; derived from method and formulation when empty.
    pub name: String,
    pub method: Method,
    /// Ignored by the stochastic methods, which always train `(W, θ)` jointly.
    pub formulation: Formulation,
    /// Work-unit budget of a single-level run.
    pub budget: f64,
    pub gn: GnConfig,
    pub lbfgs: LbfgsConfig,
    pub sgd: SgdConfig,
    /// Stop when `‖∇‖ ≤ 1e-8·max(1, ‖∇₀‖)`; off for pure budget runs.
    pub stagnation_stop: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            method: Method::GnTr,
            formulation: Formulation::Reduced,
            budget: 100.0,
            gn: GnConfig::default(),
            lbfgs: LbfgsConfig::default(),
            sgd: SgdConfig::default(),
            stagnation_stop: true,
        }
    }
}

impl OptimizerConfig {
    pub fn label(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        let vpro = if self.formulation == Formulation::Reduced { "vpro" } else { "" };
        match self.method {
            Method::GnTr => format!("GN{vpro}"),
            Method::Lbfgs => format!("L-BFGS{vpro}"),
            Method::Adam => "ADAM".into(),
            Method::SgdNesterov => "SGD-Nesterov".into(),
        }
    }

    /// Formulation actually optimized.
    pub fn effective_formulation(&self) -> Formulation {
        match self.method {
            Method::Adam | Method::SgdNesterov => Formulation::Full,
            _ => self.formulation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0) {
            return Err(Error::Config(format!("budget must be >= 0, got {}", self.budget)));
        }
        self.gn.trust_region.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.gn.r_max == 0 {
            return Err(Error::Config("gn.r_max must be >= 1".into()));
        }
        if self.lbfgs.memory == 0 {
            return Err(Error::Config("lbfgs.memory must be >= 1".into()));
        }
        if !(0.0 < self.lbfgs.c1 && self.lbfgs.c1 < self.lbfgs.c2 && self.lbfgs.c2 < 1.0) {
            return Err(Error::Config("need 0 < lbfgs.c1 < lbfgs.c2 < 1".into()));
        }
        if !(self.sgd.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.sgd.learning_rate)));
        }
        if self.sgd.batch_size == 0 {
            return Err(Error::Config("sgd.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Why a run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Budget,
    Converged,
    MaxIter,
    Stalled,
    Diverged,
}

/// Final iterate of one optimizer call.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub x: DVector<f64>,
    pub status: Status,
    pub iterations: usize,
}

/// Ledger and budget for one optimizer call on one level.
pub struct RunContext<'a> {
    pub ledger: &'a mut RunLedger,
    pub level: usize,
    /// Passes recorded before this call (earlier levels).
    pub base_passes: u64,
    /// Objective pass count when the call started.
    start_passes: u64,
    /// Pass allowance of this call.
    budget_passes: u64,
}

impl<'a> RunContext<'a> {
    pub fn new<O: Objective>(ledger: &'a mut RunLedger, level: usize, obj: &O, budget_wu: f64) -> Self {
        let base_passes = ledger.total_passes();
        let budget_passes = (budget_wu * obj.n_train() as f64).round().max(0.0) as u64;
        Self { ledger, level, base_passes, start_passes: obj.passes(), budget_passes }
    }

    pub fn used<O: Objective>(&self, obj: &O) -> u64 {
        obj.passes() - self.start_passes
    }

    pub fn exhausted<O: Objective>(&self, obj: &O) -> bool {
        self.used(obj) >= self.budget_passes
    }

    /// Appends a row stamped with level and cumulative passes.
    pub fn record<O: Objective>(&mut self, obj: &O, state: &O::State, mut row: LedgerRow) {
        row.level = self.level;
        row.passes = self.base_passes + self.used(obj);
        row.metrics = obj.metrics(state);
        let inner = row.metrics.inner_radius_error;
        if inner > 0.0 {
            row.lambda_error = Some(row.lambda_error.unwrap_or(0.0).max(inner));
        }
        self.ledger.push(row);
    }
}

/// Gradient floor of the stagnation stop.
pub(crate) fn stagnation_floor(g0: f64) -> f64 {
    1e-8 * g0.max(1.0)
}
