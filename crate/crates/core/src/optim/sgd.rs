//! Mini-batch ADAM and SGD with Nesterov momentum on `(W, θ)` jointly.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LedgerRow, RunContext, RunOutcome, Status};
use crate::error::{Error, Result};
use crate::reduced::{eval_full, Batch, Formulation, ModelObjective, Objective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SgdMethod {
    Adam,
    Nesterov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Nesterov momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 32, momentum: 0.9, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Update rule state.
struct Stepper {
    method: SgdMethod,
    cfg: SgdConfig,
    lr: f64,
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Stepper {
    fn new(method: SgdMethod, cfg: SgdConfig, n: usize) -> Self {
        Self { method, cfg, lr: cfg.learning_rate, m: DVector::zeros(n), v: DVector::zeros(n), t: 0 }
    }

    /// Returns the increment for gradient `g`.
    fn step(&mut self, g: &DVector<f64>) -> DVector<f64> {
        self.t += 1;
        match self.method {
            SgdMethod::Adam => {
                let c = &self.cfg;
                self.m = &self.m * c.beta1 + g * (1.0 - c.beta1);
                self.v = &self.v * c.beta2 + g.component_mul(g) * (1.0 - c.beta2);
                let mb = 1.0 - c.beta1.powi(self.t);
                let vb = 1.0 - c.beta2.powi(self.t);
                self.m.zip_map(&self.v, |m, v| -self.lr * (m / mb) / ((v / vb).sqrt() + c.epsilon))
            }
            SgdMethod::Nesterov => {
                // Velocity form: v ← μv − ηg; x ← x + μv − ηg.
                let mu = self.cfg.momentum;
                self.m = &self.m * mu - g * self.lr;
                &self.m * mu - g * self.lr
            }
        }
    }
}

/// Epoch-based stochastic training. Every epoch visits each training sample
/// once in a forward and a backward pass (2 work units). Ledger rows are
/// written per epoch with uncounted full-data metrics.
pub fn run_sgd(
    obj: &mut ModelObjective,
    x0: &DVector<f64>,
    method: SgdMethod,
    cfg: &SgdConfig,
    seed: u64,
    ctx: &mut RunContext<'_>,
) -> Result<RunOutcome> {
    if obj.formulation != Formulation::Full {
        return Err(Error::InvalidInput("stochastic methods train the full formulation".into()));
    }
    let n = obj.n_train();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stepper = Stepper::new(method, *cfg, x0.len());
    let mut x = x0.clone();
    let state = full_state(obj, &x)?;
    ctx.record(obj, &state, LedgerRow { iter: 0, objective: state.value, ..Default::default() });
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch = 0;
    let mut halved = false;
    let status = loop {
        if ctx.exhausted(obj) {
            break Status::Budget;
        }
        epoch += 1;
        order.shuffle(&mut rng);
        let start = x.clone();
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch_size) {
            let y = obj.y.select_columns(chunk);
            let c = obj.c.select_columns(chunk);
            let (w, theta) = obj.unpack(&x);
            let w = w.expect("full formulation");
            let e = match eval_full(&obj.net, &theta, &w, Batch { y: &y, c: &c }, obj.loss, &obj.reg) {
                Ok(e) if e.value.is_finite() => e,
                Ok(_) | Err(Error::DivergedForward { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let g = obj.pack(&e.grad_w, e.grad_theta.as_ref().expect("gradient computed"));
            x += stepper.step(&g);
        }
        if diverged {
            if halved {
                x = start;
                break Status::Diverged;
            }
            halved = true;
            stepper.lr *= 0.5;
            x = start;
        }
        let state = full_state(obj, &x)?;
        ctx.record(obj, &state, LedgerRow { iter: epoch, objective: state.value, ..Default::default() });
    };
    Ok(RunOutcome { x, status, iterations: epoch })
}

/// Full-data evaluation at `x` without charging passes.
fn full_state(obj: &ModelObjective, x: &DVector<f64>) -> Result<crate::reduced::ObjectiveEval> {
    let (w, theta) = obj.unpack(x);
    let w: DMatrix<f64> = w.expect("full formulation");
    // A clone carries its own pass counter.
    let net = obj.net.clone();
    eval_full(&net, &theta, &w, obj.batch(), obj.loss, &obj.reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        for method in [SgdMethod::Adam, SgdMethod::Nesterov] {
            let mut s = Stepper::new(method, SgdConfig::default(), 3);
            for _ in 0..5 {
                assert!(s.step(&DVector::zeros(3)).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn adam_first_step_has_learning_rate_length() {
        let mut s = Stepper::new(SgdMethod::Adam, SgdConfig::default(), 2);
        let d = s.step(&DVector::from_vec(vec![3.0, -0.5]));
        assert!((d[0] + 1e-3).abs() < 1e-9 && (d[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // f(x) = ½ Σ a_i x_i², gradient a ⊙ x.
        let a = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        for method in [SgdMethod::Adam, SgdMethod::Nesterov] {
            let mut s = Stepper::new(method, SgdConfig { learning_rate: 1e-2, ..Default::default() }, 3);
            let mut x = DVector::from_vec(vec![1.0, -1.0, 2.0]);
            let f = |x: &DVector<f64>| 0.5 * a.component_mul(x).dot(x);
            let mut prev = f(&x);
            for _ in 0..50 {
                let g = a.component_mul(&x);
                x += s.step(&g);
                let v = f(&x);
                assert!(v < prev, "{method:?}");
                prev = v;
            }
        }
    }
}
