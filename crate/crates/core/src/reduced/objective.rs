use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{eval_full_value, eval_reduced_value, Batch, ObjectiveEval};
use crate::error::{Error, Result};
use crate::features::Network;
use crate::inner::{self, InnerConfig, InnerProblem};
use crate::loss::LossKind;
use crate::regularizer::Regularizer;

/// Optimization variable: `θ` alone, or `[vec(W); θ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    Full,
    Reduced,
}

/// A value evaluation and the state needed for its gradient and curvature.
#[derive(Debug, Clone)]
pub struct Evaluated<S> {
    pub value: f64,
    /// Inner solve did not converge.
    pub degraded: bool,
    pub state: S,
}

/// Uncounted diagnostics written to the run ledger.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub inner_iters: usize,
    pub inner_grad_norm: f64,
    /// Largest relative radius error of the inner λ searches.
    pub inner_radius_error: f64,
    /// Largest `‖δw‖/Δ` over accepted inner steps.
    pub inner_step_ratio: f64,
}

/// What the outer optimizers see.
///
/// `evaluate` costs one forward pass, `gradient` one backward pass and
/// `gn_apply` one of each; [`Objective::passes`] reports the running total.
pub trait Objective {
    type State;

    fn dim(&self) -> usize;
    /// Sample passes charged so far.
    fn passes(&self) -> u64;
    /// Training-set size, the work-unit denominator.
    fn n_train(&self) -> usize;
    fn evaluate(&mut self, x: &DVector<f64>) -> Result<Evaluated<Self::State>>;
    fn gradient(&mut self, s: &mut Self::State) -> Result<DVector<f64>>;
    fn gn_apply(&mut self, s: &Self::State, v: &DVector<f64>) -> Result<DVector<f64>>;
    /// Called when the optimizer moves to `s`.
    fn accept(&mut self, _s: &Self::State) {}
    fn metrics(&self, s: &Self::State) -> Metrics;
}

/// Training data, network and regularization for one level of a run.
#[derive(Debug)]
pub struct ModelObjective {
    pub net: Network,
    pub y: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub validation: Option<(DMatrix<f64>, DMatrix<f64>)>,
    pub loss: LossKind,
    pub reg: Regularizer,
    pub formulation: Formulation,
    pub inner: InnerConfig,
    /// Warm start of cross-entropy inner solves.
    pub warm: DMatrix<f64>,
    /// Start every inner solve from `W = 0` instead of `warm`.
    pub cold_start: bool,
}

impl ModelObjective {
    pub fn new(
        net: Network,
        y: DMatrix<f64>,
        c: DMatrix<f64>,
        loss: LossKind,
        reg: Regularizer,
        formulation: Formulation,
        inner: InnerConfig,
    ) -> Result<Self> {
        if y.ncols() != c.ncols() {
            return Err(Error::ShapeMismatch(format!("{} inputs but {} targets", y.ncols(), c.ncols())));
        }
        if y.nrows() != net.arch().n_in() {
            return Err(Error::Mismatch(format!(
                "data has {} input features, architecture expects {}",
                y.nrows(),
                net.arch().n_in()
            )));
        }
        if reg.op.domain_len() != net.n_weights() {
            return Err(Error::Mismatch("regularizer built for a different architecture".into()));
        }
        loss.validate_targets(&c)?;
        let warm = DMatrix::zeros(c.nrows(), net.arch().n_out());
        Ok(Self { net, y, c, validation: None, loss, reg, formulation, inner, warm, cold_start: false })
    }

    pub fn with_validation(mut self, y: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if y.ncols() != c.ncols() || y.nrows() != self.y.nrows() || c.nrows() != self.c.nrows() {
            return Err(Error::ShapeMismatch("validation data does not match training data".into()));
        }
        self.validation = Some((y, c));
        Ok(self)
    }

    pub fn n_target(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_w(&self) -> usize {
        self.c.nrows() * self.net.arch().n_out()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch { y: &self.y, c: &self.c }
    }

    /// `W` minimizing `Φ(·, θ)` on the training data, computed without
    /// charging passes. Used to give every method the same starting `W`.
    pub fn solve_w(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let z = self.net.predict(theta, &self.y)?;
        let p = InnerProblem { z: &z, c: &self.c, loss: self.loss, alpha2: self.reg.alpha2 };
        Ok(inner::solve(&p, &self.warm, &self.inner)?.w)
    }

    /// Packs `(W, θ)` into the optimization variable.
    pub fn pack(&self, w: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
        match self.formulation {
            Formulation::Reduced => theta.clone(),
            Formulation::Full => super::concat(w, theta),
        }
    }

    /// Splits the optimization variable; `W` is `None` on the reduced path.
    pub fn unpack(&self, x: &DVector<f64>) -> (Option<DMatrix<f64>>, DVector<f64>) {
        match self.formulation {
            Formulation::Reduced => (None, x.clone()),
            Formulation::Full => {
                let nw = self.n_w();
                let w = DMatrix::from_column_slice(self.n_target(), self.net.arch().n_out(), &x.as_slice()[..nw]);
                (Some(w), x.rows(nw, x.len() - nw).into_owned())
            }
        }
    }

    /// Loss and accuracy of `(W, θ)` on arbitrary data, uncounted.
    pub fn score(
        &self,
        w: &DMatrix<f64>,
        theta: &DVector<f64>,
        y: &DMatrix<f64>,
        c: &DMatrix<f64>,
    ) -> Result<(f64, Option<f64>)> {
        let out = w * self.net.predict(theta, y)?;
        let le = self.loss.evaluate(&out, c)?;
        Ok((le.value, self.loss.accuracy(&out, c)))
    }
}

impl Objective for ModelObjective {
    type State = ObjectiveEval;

    fn dim(&self) -> usize {
        match self.formulation {
            Formulation::Reduced => self.net.n_weights(),
            Formulation::Full => self.net.n_weights() + self.n_w(),
        }
    }

    fn passes(&self) -> u64 {
        self.net.counter().total()
    }

    fn n_train(&self) -> usize {
        self.y.ncols()
    }

    fn evaluate(&mut self, x: &DVector<f64>) -> Result<Evaluated<ObjectiveEval>> {
        let (w, theta) = self.unpack(x);
        let batch = Batch { y: &self.y, c: &self.c };
        let e = match w {
            Some(w) => eval_full_value(&self.net, &theta, &w, batch, self.loss, &self.reg)?,
            None => {
                let cold;
                let warm = if self.cold_start {
                    cold = DMatrix::zeros(self.warm.nrows(), self.warm.ncols());
                    &cold
                } else {
                    &self.warm
                };
                eval_reduced_value(&self.net, &theta, batch, self.loss, &self.reg, &self.inner, warm)?
            }
        };
        Ok(Evaluated { value: e.value, degraded: e.degraded, state: e })
    }

    fn gradient(&mut self, s: &mut ObjectiveEval) -> Result<DVector<f64>> {
        s.gradient(&self.net)
    }

    fn gn_apply(&mut self, s: &ObjectiveEval, v: &DVector<f64>) -> Result<DVector<f64>> {
        s.jacobian(&self.net).gn_apply(v)
    }

    fn accept(&mut self, s: &ObjectiveEval) {
        self.warm = s.w.clone();
    }

    fn metrics(&self, s: &ObjectiveEval) -> Metrics {
        let out = &s.w * &s.z;
        let (val_loss, val_acc) = match &self.validation {
            Some((y, c)) => match self.score(&s.w, &s.theta, y, c) {
                Ok((l, a)) => (Some(l), a),
                Err(_) => (Some(f64::NAN), None),
            },
            None => (None, None),
        };
        let (inner_iters, inner_grad_norm, inner_radius_error, inner_step_ratio) = s
            .inner
            .as_ref()
            .map_or((0, 0.0, 0.0, 0.0), |i| (i.iterations, i.grad_norm, i.max_radius_error, i.max_step_ratio));
        Metrics {
            train_loss: s.loss_value,
            train_acc: self.loss.accuracy(&out, &self.c),
            val_loss,
            val_acc,
            inner_iters,
            inner_grad_norm,
            inner_radius_error,
            inner_step_ratio,
        }
    }
}
