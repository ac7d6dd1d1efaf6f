//! Loss families in the model-output argument: value, per-sample gradient and
//! Hessian action, all averaged over the batch.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LeastSquares,
    Logistic,
    Multinomial,
}

impl LossKind {
    pub fn is_cross_entropy(self) -> bool {
        !matches!(self, LossKind::LeastSquares)
    }

    /// Checks the target matrix against the loss domain.
    pub fn validate_targets(self, c: &DMatrix<f64>) -> Result<()> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("targets contain non-finite entries".into()));
        }
        match self {
            LossKind::LeastSquares => Ok(()),
            LossKind::Logistic => {
                if c.nrows() != 1 {
                    return Err(Error::InvalidInput(format!(
                        "logistic loss needs a single target row, got {}",
                        c.nrows()
                    )));
                }
                if let Some(v) = c.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidInput(format!("logistic target {v} not in {{0, 1}}")));
                }
                Ok(())
            }
            LossKind::Multinomial => {
                for (j, col) in c.column_iter().enumerate() {
                    let s: f64 = col.iter().sum();
                    if (s - 1.0).abs() > 1e-8 || col.iter().any(|&v| v < 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "target column {j} is not in the unit simplex (sum {s})"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Evaluates without validating targets; callers validate once up front.
    pub fn evaluate(self, x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<LossEval> {
        if x.shape() != c.shape() {
            return Err(Error::ShapeMismatch(format!("outputs {:?} vs targets {:?}", x.shape(), c.shape())));
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        Ok(match self {
            LossKind::LeastSquares => least_squares(x, c),
            LossKind::Logistic => logistic(x, c),
            LossKind::Multinomial => multinomial(x, c),
        })
    }

    /// Classification accuracy of outputs `x` against `c`; `None` for regression.
    pub fn accuracy(self, x: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<f64> {
        let n = x.ncols();
        if n == 0 {
            return None;
        }
        let hits = match self {
            LossKind::LeastSquares => return None,
            LossKind::Logistic => x.iter().zip(c.iter()).filter(|(&xi, &ci)| (xi > 0.0) == (ci > 0.5)).count(),
            LossKind::Multinomial => {
                x.column_iter().zip(c.column_iter()).filter(|(xc, cc)| xc.argmax().0 == cc.argmax().0).count()
            }
        };
        Some(hits as f64 / n as f64)
    }
}

#[derive(Debug, Clone)]
enum Curvature {
    /// `∇²L = I / |T|`.
    Identity { scale: f64 },
    /// Per-sample `h(1−h) / |T|`.
    Logistic { weights: DVector<f64> },
    /// Per-sample `(diag(p) − p pᵀ) / |T|`.
    Multinomial { probs: DMatrix<f64>, scale: f64 },
}

/// Loss value, per-sample gradient columns and the Hessian action.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub kind: LossKind,
    pub value: f64,
    /// `N_target × |T|`, already divided by `|T|`.
    pub grad: DMatrix<f64>,
    curvature: Curvature,
}

impl LossEval {
    /// Applies the block-diagonal per-sample Hessian to the columns of `v`.
    pub fn hess_apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(v.shape(), self.grad.shape(), "Hessian action shape");
        match &self.curvature {
            Curvature::Identity { scale } => v * *scale,
            Curvature::Logistic { weights } => {
                let mut out = v.clone();
                for (j, w) in weights.iter().enumerate() {
                    out[(0, j)] *= w;
                }
                out
            }
            Curvature::Multinomial { probs, scale } => {
                let mut out = v.clone();
                for ((mut o, p), vc) in out.column_iter_mut().zip(probs.column_iter()).zip(v.column_iter()) {
                    let pv = p.dot(&vc);
                    for k in 0..o.len() {
                        o[k] = scale * p[k] * (vc[k] - pv);
                    }
                }
                out
            }
        }
    }

    /// Class probabilities for cross-entropy losses.
    pub fn probabilities(&self) -> Option<DMatrix<f64>> {
        match &self.curvature {
            Curvature::Identity { .. } => None,
            Curvature::Logistic { weights: _ } => None,
            Curvature::Multinomial { probs, .. } => Some(probs.clone()),
        }
    }
}

fn least_squares(x: &DMatrix<f64>, c: &DMatrix<f64>) -> LossEval {
    let scale = 1.0 / x.ncols() as f64;
    let r = x - c;
    LossEval {
        kind: LossKind::LeastSquares,
        value: 0.5 * scale * r.norm_squared(),
        grad: r * scale,
        curvature: Curvature::Identity { scale },
    }
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn logistic(x: &DMatrix<f64>, c: &DMatrix<f64>) -> LossEval {
    let n = x.ncols();
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(1, n);
    let mut weights = DVector::zeros(n);
    for j in 0..n {
        let (t, cj) = (x[(0, j)], c[(0, j)]);
        // −c log h − (1−c) log(1−h) with h = σ(t).
        value += cj * softplus(-t) + (1.0 - cj) * softplus(t);
        let h = sigmoid(t);
        grad[(0, j)] = scale * (h - cj);
        weights[j] = scale * h * (1.0 - h);
    }
    LossEval { kind: LossKind::Logistic, value: value * scale, grad, curvature: Curvature::Logistic { weights } }
}

fn multinomial(x: &DMatrix<f64>, c: &DMatrix<f64>) -> LossEval {
    let n = x.ncols();
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut probs = DMatrix::zeros(x.nrows(), n);
    for (j, col) in x.column_iter().enumerate() {
        let shift = col.max();
        let mut denom = 0.0;
        for k in 0..col.len() {
            let e = (col[k] - shift).exp();
            probs[(k, j)] = e;
            denom += e;
        }
        let log_denom = denom.ln() + shift;
        for k in 0..col.len() {
            probs[(k, j)] /= denom;
            let ck = c[(k, j)];
            if ck != 0.0 {
                value -= ck * (col[k] - log_denom);
            }
        }
    }
    let grad = (&probs - c) * scale;
    LossEval {
        kind: LossKind::Multinomial,
        value: value * scale,
        grad,
        curvature: Curvature::Multinomial { probs, scale },
    }
}

pub fn eval_least_squares(x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<LossEval> {
    LossKind::LeastSquares.validate_targets(c)?;
    LossKind::LeastSquares.evaluate(x, c)
}

pub fn eval_logistic(x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<LossEval> {
    LossKind::Logistic.validate_targets(c)?;
    LossKind::Logistic.evaluate(x, c)
}

pub fn eval_multinomial(x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<LossEval> {
    LossKind::Multinomial.validate_targets(c)?;
    LossKind::Multinomial.evaluate(x, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frob_dot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0))
    }

    fn one_hot(k: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(k, n);
        for j in 0..n {
            c[(rng.random_range(0..k), j)] = 1.0;
        }
        c
    }

    fn targets_for(kind: LossKind, rows: usize, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        match kind {
            LossKind::LeastSquares => random(rows, n, rng),
            LossKind::Logistic => DMatrix::from_fn(1, n, |_, _| f64::from(rng.random_range(0..2u8))),
            LossKind::Multinomial => one_hot(rows, n, rng),
        }
    }

    #[test]
    fn least_squares_examples() {
        let c = DMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let e = eval_least_squares(&c, &c).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.grad.norm(), 0.0);

        let x = DMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        let e = eval_least_squares(&x, &DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(e.value, 12.5);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(4, 8, &mut rng);
        let c = random(4, 8, &mut rng);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..8 {
                oracle += (x[(i, j)] - c[(i, j)]).powi(2);
            }
        }
        oracle /= 16.0;
        assert!((eval_least_squares(&x, &c).unwrap().value - oracle).abs() < 1e-14);
    }

    #[test]
    fn multinomial_examples() {
        let c = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e = eval_multinomial(&DMatrix::zeros(2, 1), &c).unwrap();
        assert!((e.grad[(0, 0)] + 0.5).abs() < 1e-15 && (e.grad[(1, 0)] - 0.5).abs() < 1e-15);

        let c = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        let e = eval_multinomial(&DMatrix::zeros(3, 1), &c).unwrap();
        assert!(e.probabilities().unwrap().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!((e.value - 3f64.ln()).abs() < 1e-15);
        // Hessian columns: (1/3) e_k − (1/9) e.
        for k in 0..3 {
            let mut v = DMatrix::zeros(3, 1);
            v[(k, 0)] = 1.0;
            let hv = e.hess_apply(&v);
            for i in 0..3 {
                let expected = if i == k { 1.0 / 3.0 } else { 0.0 } - 1.0 / 9.0;
                assert!((hv[(i, 0)] - expected).abs() < 1e-15);
            }
            assert!(hv.sum().abs() < 1e-15);
        }
    }

    #[test]
    fn multinomial_rejects_non_simplex_targets() {
        let c = DMatrix::from_column_slice(2, 1, &[0.7, 0.7]);
        assert!(matches!(eval_multinomial(&DMatrix::zeros(2, 1), &c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn multinomial_large_logits_stay_finite() {
        let x = DMatrix::from_column_slice(2, 1, &[1000.0, -1000.0]);
        let c = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let e = eval_multinomial(&x, &c).unwrap();
        assert!((e.value - 2000.0).abs() < 1e-9);
        assert!(e.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn logistic_examples() {
        let z = DMatrix::zeros(1, 1);
        let e = eval_logistic(&z, &DMatrix::zeros(1, 1)).unwrap();
        assert!((e.value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(e.grad[(0, 0)], 0.5);
        let e = eval_logistic(&z, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(e.grad[(0, 0)], -0.5);
        assert!(eval_logistic(&z, &DMatrix::from_element(1, 1, 0.5)).is_err());
    }

    #[test]
    fn logistic_matches_two_class_multinomial_on_logit_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(1, 10, &mut rng);
        let c = targets_for(LossKind::Logistic, 1, 10, &mut rng);
        let mut x2 = DMatrix::zeros(2, 10);
        let mut c2 = DMatrix::zeros(2, 10);
        for j in 0..10 {
            x2[(1, j)] = x[(0, j)];
            c2[(1, j)] = c[(0, j)];
            c2[(0, j)] = 1.0 - c[(0, j)];
        }
        let a = eval_logistic(&x, &c).unwrap().value;
        let b = eval_multinomial(&x2, &c2).unwrap().value;
        assert!((a - b).abs() < 1e-14);
    }

    /// Observed order of `|f(x+hδ) − f(x) − h ∇fᵀδ|` over h = 1e-2 … 1e-6 for
    /// all three losses.
    #[test]
    fn gradients_pass_taylor_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for kind in [LossKind::LeastSquares, LossKind::Logistic, LossKind::Multinomial] {
            let rows = if kind == LossKind::Logistic { 1 } else { 3 };
            let x = random(rows, 6, &mut rng);
            let c = targets_for(kind, rows, 6, &mut rng);
            let d = random(rows, 6, &mut rng);
            let e = kind.evaluate(&x, &c).unwrap();
            let slope = frob_dot(&e.grad, &d);
            let hs = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
            let errs: Vec<f64> = hs
                .iter()
                .map(|h| {
                    let f = kind.evaluate(&(&x + &d * *h), &c).unwrap().value;
                    (f - e.value - h * slope).abs()
                })
                .collect();
            let order = (errs[0].log10() - errs[2].log10()) / 2.0;
            assert!(order >= 1.9, "{kind:?}: order {order}, errors {errs:?}");
        }
    }

    #[test]
    fn multinomial_hessian_kills_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(4, 7, &mut rng);
        let c = one_hot(4, 7, &mut rng);
        let e = eval_multinomial(&x, &c).unwrap();
        let hv = e.hess_apply(&DMatrix::from_element(4, 7, 1.0));
        assert!(hv.iter().all(|v| v.abs() < 1e-16));
    }

    proptest! {
        #[test]
        fn hessians_are_psd_and_values_permutation_invariant(seed in 0u64..300, kind_idx in 0usize..3) {
            let kind = [LossKind::LeastSquares, LossKind::Logistic, LossKind::Multinomial][kind_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = if kind == LossKind::Logistic { 1 } else { 3 };
            let x = random(rows, 5, &mut rng);
            let c = targets_for(kind, rows, 5, &mut rng);
            let e = kind.evaluate(&x, &c).unwrap();
            let v = random(rows, 5, &mut rng);
            prop_assert!(frob_dot(&v, &e.hess_apply(&v)) >= -1e-12);

            let perm = [3usize, 0, 4, 1, 2];
            let xp = DMatrix::from_fn(rows, 5, |i, j| x[(i, perm[j])]);
            let cp = DMatrix::from_fn(rows, 5, |i, j| c[(i, perm[j])]);
            let ep = kind.evaluate(&xp, &cp).unwrap();
            prop_assert!((ep.value - e.value).abs() <= 1e-14 * (1.0 + e.value.abs()));
        }
    }
}
