//! Tikhonov terms `R(θ) = (α₁/2)‖Bθ‖²` and `S(W) = (α₂/2)‖W‖²_F`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ArchSpec;

/// The operator `B`: identity on the opening layer, forward time differences
/// `(θ(t_{i+1}) − θ(t_i))/h` on the node weights of a neural ODE. An MLP gets
/// the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeDiffOperator {
    /// Length of the leading identity block.
    head: usize,
    /// Length of one time node (`K(t_i)` and `b(t_i)`).
    node: usize,
    /// Number of cells `d`; zero for the pure identity.
    cells: usize,
    h: f64,
}

impl TimeDiffOperator {
    pub fn new(arch: &ArchSpec) -> Self {
        match arch {
            ArchSpec::NeuralOde { n_in, width, final_time, cells, .. } => Self {
                head: width * n_in + width,
                node: width * width + width,
                cells: *cells,
                h: final_time / *cells as f64,
            },
            ArchSpec::Mlp { .. } => Self { head: arch.layout().len(), node: 0, cells: 0, h: 1.0 },
        }
    }

    /// Length of `θ`.
    pub fn domain_len(&self) -> usize {
        if self.cells == 0 {
            self.head
        } else {
            self.head + (self.cells + 1) * self.node
        }
    }

    /// Length of `Bθ`.
    pub fn range_len(&self) -> usize {
        self.head + self.cells * self.node
    }

    fn check(&self, len: usize, expected: usize) -> Result<()> {
        if len != expected {
            return Err(Error::ShapeMismatch(format!("vector of length {len}, expected {expected}")));
        }
        Ok(())
    }

    pub fn apply(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(theta.len(), self.domain_len())?;
        let mut out = DVector::zeros(self.range_len());
        out.rows_mut(0, self.head).copy_from(&theta.rows(0, self.head));
        for i in 0..self.cells {
            let a = self.head + i * self.node;
            let diff = (theta.rows(a + self.node, self.node) - theta.rows(a, self.node)) / self.h;
            out.rows_mut(a, self.node).copy_from(&diff);
        }
        Ok(out)
    }

    pub fn apply_transpose(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(v.len(), self.range_len())?;
        let mut out = DVector::zeros(self.domain_len());
        out.rows_mut(0, self.head).copy_from(&v.rows(0, self.head));
        for i in 0..self.cells {
            let a = self.head + i * self.node;
            let s = v.rows(a, self.node) / self.h;
            let mut lo = out.rows_mut(a, self.node);
            lo -= &s;
            let mut hi = out.rows_mut(a + self.node, self.node);
            hi += &s;
        }
        Ok(out)
    }

    /// `BᵀB θ`.
    pub fn normal_apply(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.apply_transpose(&self.apply(theta)?)
    }
}

/// `apply_B` on a flat weight vector.
pub fn apply_b(op: &TimeDiffOperator, theta: &DVector<f64>) -> Result<DVector<f64>> {
    op.apply(theta)
}

/// `apply_Bᵀ`.
pub fn apply_b_transpose(op: &TimeDiffOperator, v: &DVector<f64>) -> Result<DVector<f64>> {
    op.apply_transpose(v)
}

/// Regularization weights as written in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        Self { alpha1: 1e-10, alpha2: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    pub alpha1: f64,
    pub alpha2: f64,
    pub op: TimeDiffOperator,
}

impl Regularizer {
    pub fn new(arch: &ArchSpec, weights: RegWeights) -> Result<Self> {
        if !(weights.alpha1 >= 0.0) || !(weights.alpha2 >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "regularization weights must be >= 0, got alpha1 = {}, alpha2 = {}",
                weights.alpha1, weights.alpha2
            )));
        }
        Ok(Self { alpha1: weights.alpha1, alpha2: weights.alpha2, op: TimeDiffOperator::new(arch) })
    }

    /// `R(θ)`.
    pub fn theta_value(&self, theta: &DVector<f64>) -> Result<f64> {
        if self.alpha1 == 0.0 {
            return Ok(0.0);
        }
        Ok(0.5 * self.alpha1 * self.op.apply(theta)?.norm_squared())
    }

    /// `∇R(θ) = α₁ BᵀBθ`, also the curvature action of `R`.
    pub fn theta_grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if self.alpha1 == 0.0 {
            return Ok(DVector::zeros(theta.len()));
        }
        Ok(self.op.normal_apply(theta)? * self.alpha1)
    }

    /// `S(W)`.
    pub fn w_value(&self, w: &DMatrix<f64>) -> f64 {
        0.5 * self.alpha2 * w.norm_squared()
    }
}
