//! Full and reduced objectives with matrix-free Jacobian products.
//!
//! The full objective `Φ(W, θ)` treats `x = [vec(W); θ]` as one variable. The
//! reduced objective `Φ_red(θ) = Φ(W(θ), θ)` eliminates `W` by an inner solve;
//! its gradient is `∇_θΦ(W(θ), θ)` and its Jacobian carries the implicit term
//! `J_θ w(θ)`.

mod objective;

pub use objective::{Evaluated, Formulation, Metrics, ModelObjective, Objective};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::features::{Network, Tape};
use crate::inner::{self, InnerConfig, InnerFactors, InnerProblem, InnerSolution};
use crate::linalg::{KrylovFactors, Pseudoinverse, SvdFactors};
use crate::loss::{LossEval, LossKind};
use crate::regularizer::Regularizer;

/// Inputs `y` (`N_in × |T|`) and targets `c` (`N_target × |T|`).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub y: &'a DMatrix<f64>,
    pub c: &'a DMatrix<f64>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.y.ncols() == 0
    }

    fn check(&self, net: &Network) -> Result<()> {
        if self.y.ncols() != self.c.ncols() {
            return Err(Error::ShapeMismatch(format!("{} inputs but {} targets", self.y.ncols(), self.c.ncols())));
        }
        if self.y.nrows() != net.arch().n_in() {
            return Err(Error::Mismatch(format!(
                "inputs have {} features, network expects {}",
                self.y.nrows(),
                net.arch().n_in()
            )));
        }
        Ok(())
    }
}

/// Inverse-Hessian action of a cross-entropy inner problem,
/// `Q_r H_r† Q_{r+1}ᵀ`.
#[derive(Debug, Clone)]
pub struct CeJacobian {
    factors: KrylovFactors,
    pinv: Pseudoinverse,
}

impl CeJacobian {
    pub fn new(factors: KrylovFactors) -> Result<Self> {
        let pinv = Pseudoinverse::new(&factors.h)?;
        Ok(Self { factors, pinv })
    }

    pub fn rank(&self) -> usize {
        self.factors.rank
    }

    /// The same factorization truncated to rank `r`.
    pub fn truncated(&self, r: usize) -> Result<Self> {
        let r = r.clamp(1, self.factors.rank);
        let f = &self.factors;
        let factors = KrylovFactors {
            q: f.q.columns(0, r + 1).into_owned(),
            h: f.h.view((0, 0), (r + 1, r)).into_owned(),
            beta: f.beta,
            rank: r,
            residual: f64::NAN,
            invariant: f.invariant && r == f.rank,
        };
        Self::new(factors)
    }

    fn inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        let r = self.factors.rank;
        let proj = self.factors.q.tr_mul(v);
        self.factors.q.columns(0, r) * self.pinv.apply(&proj)
    }

    fn inverse_transpose(&self, v: &DVector<f64>) -> DVector<f64> {
        let r = self.factors.rank;
        let proj = self.factors.q.columns(0, r).tr_mul(v);
        &self.factors.q * self.pinv.apply_transpose(&proj)
    }
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn mat_of(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// `J_θ w · δθ` for least squares from `δZ = J_θZ δθ` and `R = W Z − C`:
/// `−((1/√|T|) W δZ V Σ + (1/|T|) R δZᵀ U)(Σ² + α₂I)⁻¹ Uᵀ`.
pub fn jacobian_w_ls(
    svd: &SvdFactors,
    w: &DMatrix<f64>,
    dz: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    alpha2: f64,
) -> DMatrix<f64> {
    let t = dz.ncols() as f64;
    let (a, b) = (1.0 / t.sqrt(), 1.0 / t);
    let mut core = (w * dz * &svd.v) * a;
    for (j, s) in svd.sigma.iter().enumerate() {
        core.column_mut(j).scale_mut(*s);
    }
    core += (residual * dz.transpose() * &svd.u) * b;
    for (j, s) in svd.sigma.iter().enumerate() {
        core.column_mut(j).scale_mut(-ls_damping(*s, alpha2));
    }
    core * svd.u.transpose()
}

/// Adjoint of [`jacobian_w_ls`] in `δZ`:
/// `−((1/√|T|) Wᵀ X U D Σ Vᵀ + (1/|T|) U D Uᵀ Xᵀ R)` with `D = (Σ² + α₂I)⁻¹`.
pub fn jacobian_w_ls_transpose(
    svd: &SvdFactors,
    w: &DMatrix<f64>,
    x: &DMatrix<f64>,
    residual: &DMatrix<f64>,
    alpha2: f64,
) -> DMatrix<f64> {
    let t = residual.ncols() as f64;
    let (a, b) = (1.0 / t.sqrt(), 1.0 / t);
    let mut xud = x * &svd.u;
    for (j, s) in svd.sigma.iter().enumerate() {
        xud.column_mut(j).scale_mut(ls_damping(*s, alpha2));
    }
    let mut first = w.transpose() * &xud;
    for (j, s) in svd.sigma.iter().enumerate() {
        first.column_mut(j).scale_mut(*s);
    }
    let first = first * svd.v.transpose() * a;
    let second = (&svd.u * xud.transpose()) * residual * b;
    -(first + second)
}

fn ls_damping(sigma: f64, alpha2: f64) -> f64 {
    let d = sigma * sigma + alpha2;
    if d > 0.0 {
        1.0 / d
    } else {
        0.0
    }
}

/// `J_θ(∇_w Φ) δθ = ∇²L[W δZ] Zᵀ + G δZᵀ` with `G = ∇L`.
pub fn grad_w_theta_apply(loss: &LossEval, w: &DMatrix<f64>, z: &DMatrix<f64>, dz: &DMatrix<f64>) -> DMatrix<f64> {
    loss.hess_apply(&(w * dz)) * z.transpose() + &loss.grad * dz.transpose()
}

/// Adjoint of [`grad_w_theta_apply`] in `δZ`: `Wᵀ ∇²L[Y Z] + Yᵀ G`.
pub fn grad_w_theta_apply_transpose(
    loss: &LossEval,
    w: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> DMatrix<f64> {
    w.transpose() * loss.hess_apply(&(y * z)) + y.transpose() * &loss.grad
}

/// `J_θ w · δθ = −Q_r H_r† Q_{r+1}ᵀ vec(rhs)` where `rhs = J_θ(∇_wΦ) δθ`.
pub fn jacobian_w_ce_apply(jac: &CeJacobian, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let out = jac.inverse(&vec_of(rhs));
    -mat_of(&out, rhs.nrows(), rhs.ncols())
}

/// Adjoint of [`jacobian_w_ce_apply`].
pub fn jacobian_w_ce_apply_transpose(jac: &CeJacobian, x: &DMatrix<f64>) -> DMatrix<f64> {
    let out = jac.inverse_transpose(&vec_of(x));
    -mat_of(&out, x.nrows(), x.ncols())
}

/// Which `J_θ w` applies to a reduced evaluation.
#[derive(Debug, Clone)]
enum ImplicitJacobian {
    Ls { svd: SvdFactors },
    Ce(CeJacobian),
}

/// Objective value, gradient and the data needed for Jacobian products.
///
/// The Jacobian handle is tied to the network pass stored here; it fails with
/// a stale-tape error once the network's weights no longer match.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub formulation: Formulation,
    pub theta: DVector<f64>,
    pub w: DMatrix<f64>,
    /// Features `Z = F(Y, θ)`.
    pub z: DMatrix<f64>,
    /// `Φ = loss + R(θ) + S(W)`.
    pub value: f64,
    /// Data-misfit part of `value`.
    pub loss_value: f64,
    /// `∇_θ Φ`; filled by [`ObjectiveEval::compute_gradient`].
    pub grad_theta: Option<DVector<f64>>,
    /// `∇_W Φ`; near zero on the reduced path.
    pub grad_w: DMatrix<f64>,
    /// Inner-solve record on the reduced path.
    pub inner: Option<InnerSolution>,
    /// The inner solve stopped before reaching its tolerance.
    pub degraded: bool,
    pub loss: LossEval,
    tape: Tape,
    reg: Regularizer,
    implicit: Option<ImplicitJacobian>,
}

fn check_w(w: &DMatrix<f64>, n_target: usize, n_out: usize) -> Result<()> {
    if w.shape() != (n_target, n_out) {
        return Err(Error::ShapeMismatch(format!("W is {:?}, expected {:?}", w.shape(), (n_target, n_out))));
    }
    Ok(())
}

/// `Φ(W, θ)` without the `θ`-gradient (one forward pass).
pub fn eval_full_value(
    net: &Network,
    theta: &DVector<f64>,
    w: &DMatrix<f64>,
    batch: Batch<'_>,
    loss: LossKind,
    reg: &Regularizer,
) -> Result<ObjectiveEval> {
    batch.check(net)?;
    check_w(w, batch.c.nrows(), net.arch().n_out())?;
    let (z, tape) = net.forward(theta, batch.y)?;
    let le = loss.evaluate(&(w * &z), batch.c)?;
    let value = le.value + reg.theta_value(theta)? + reg.w_value(w);
    let grad_w = &le.grad * z.transpose() + w * reg.alpha2;
    Ok(ObjectiveEval {
        formulation: Formulation::Full,
        theta: theta.clone(),
        w: w.clone(),
        z,
        value,
        loss_value: le.value,
        grad_theta: None,
        grad_w,
        inner: None,
        degraded: false,
        loss: le,
        tape,
        reg: reg.clone(),
        implicit: None,
    })
}

/// `Φ(W, θ)` with both gradient blocks.
pub fn eval_full(
    net: &Network,
    theta: &DVector<f64>,
    w: &DMatrix<f64>,
    batch: Batch<'_>,
    loss: LossKind,
    reg: &Regularizer,
) -> Result<ObjectiveEval> {
    let mut e = eval_full_value(net, theta, w, batch, loss, reg)?;
    e.compute_gradient(net)?;
    Ok(e)
}

/// `Φ_red(θ)` without the gradient: one forward pass and an inner solve
/// started at `warm` (cross-entropy only).
pub fn eval_reduced_value(
    net: &Network,
    theta: &DVector<f64>,
    batch: Batch<'_>,
    loss: LossKind,
    reg: &Regularizer,
    cfg: &InnerConfig,
    warm: &DMatrix<f64>,
) -> Result<ObjectiveEval> {
    batch.check(net)?;
    let (z, tape) = net.forward(theta, batch.y)?;
    let p = InnerProblem { z: &z, c: batch.c, loss, alpha2: reg.alpha2 };
    let sol = inner::solve(&p, warm, cfg)?;
    let (inner_value, le, grad_w) = p.evaluate(&sol.w)?;
    let implicit = match &sol.factors {
        InnerFactors::Svd(svd) => ImplicitJacobian::Ls { svd: svd.clone() },
        InnerFactors::Krylov(f) => ImplicitJacobian::Ce(CeJacobian::new(f.clone())?),
    };
    Ok(ObjectiveEval {
        formulation: Formulation::Reduced,
        theta: theta.clone(),
        w: sol.w.clone(),
        value: inner_value + reg.theta_value(theta)?,
        loss_value: le.value,
        grad_theta: None,
        grad_w,
        degraded: !sol.converged,
        inner: Some(sol),
        loss: le,
        z,
        tape,
        reg: reg.clone(),
        implicit: Some(implicit),
    })
}

/// `Φ_red(θ)` and `∇Φ_red(θ) = ∇_θΦ(W(θ), θ)`.
pub fn eval_reduced(
    net: &Network,
    theta: &DVector<f64>,
    batch: Batch<'_>,
    loss: LossKind,
    reg: &Regularizer,
    cfg: &InnerConfig,
    warm: &DMatrix<f64>,
) -> Result<ObjectiveEval> {
    let mut e = eval_reduced_value(net, theta, batch, loss, reg, cfg, warm)?;
    e.compute_gradient(net)?;
    Ok(e)
}

impl ObjectiveEval {
    /// Fills `grad_theta` with one backward pass; a no-op when present.
    pub fn compute_gradient(&mut self, net: &Network) -> Result<&DVector<f64>> {
        if self.grad_theta.is_none() {
            let dz = self.w.transpose() * &self.loss.grad;
            let g = net.vjp(&self.theta, &self.tape, &dz)? + self.reg.theta_grad(&self.theta)?;
            self.grad_theta = Some(g);
        }
        Ok(self.grad_theta.as_ref().expect("filled above"))
    }

    /// Gradient in the optimization variable: `∇_θ` (reduced) or
    /// `[vec ∇_W; ∇_θ]` (full).
    pub fn gradient(&mut self, net: &Network) -> Result<DVector<f64>> {
        let gt = self.compute_gradient(net)?.clone();
        Ok(match self.formulation {
            Formulation::Reduced => gt,
            Formulation::Full => concat(&self.grad_w, &gt),
        })
    }

    /// Dimension of the optimization variable.
    pub fn dim(&self) -> usize {
        match self.formulation {
            Formulation::Reduced => self.theta.len(),
            Formulation::Full => self.theta.len() + self.w.len(),
        }
    }

    /// Matrix-free Jacobian of the model output `W F(Y, θ)`.
    pub fn jacobian<'a>(&'a self, net: &'a Network) -> JacHandle<'a> {
        JacHandle { net, eval: self }
    }

    /// `R = W Z − C`, recovered from the least-squares gradient.
    fn ls_residual(&self) -> DMatrix<f64> {
        &self.loss.grad * self.z.ncols() as f64
    }

    /// Implicit Jacobian factorization of a cross-entropy evaluation.
    pub fn ce_jacobian(&self) -> Option<&CeJacobian> {
        match &self.implicit {
            Some(ImplicitJacobian::Ce(j)) => Some(j),
            _ => None,
        }
    }

    /// Replaces the cross-entropy implicit Jacobian by its rank-`r` truncation.
    pub fn truncate_rank(&mut self, r: usize) -> Result<()> {
        if let Some(ImplicitJacobian::Ce(j)) = &self.implicit {
            self.implicit = Some(ImplicitJacobian::Ce(j.truncated(r)?));
        }
        Ok(())
    }
}

fn concat(w: &DMatrix<f64>, theta: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(w.len() + theta.len());
    out.rows_mut(0, w.len()).copy_from_slice(w.as_slice());
    out.rows_mut(w.len(), theta.len()).copy_from(theta);
    out
}

/// Jacobian products of the model output at one evaluation.
#[derive(Clone, Copy)]
pub struct JacHandle<'a> {
    net: &'a Network,
    eval: &'a ObjectiveEval,
}

impl JacHandle<'_> {
    pub fn dim(&self) -> usize {
        self.eval.dim()
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("direction of length {}, expected {}", v.len(), self.dim())));
        }
        Ok(())
    }

    /// `J_θ w · δθ` given `δZ = J_θZ δθ`.
    fn implicit_apply(&self, dz: &DMatrix<f64>) -> DMatrix<f64> {
        let e = self.eval;
        match e.implicit.as_ref().expect("reduced evaluation") {
            ImplicitJacobian::Ls { svd } => jacobian_w_ls(svd, &e.w, dz, &e.ls_residual(), e.reg.alpha2),
            ImplicitJacobian::Ce(jac) => jacobian_w_ce_apply(jac, &grad_w_theta_apply(&e.loss, &e.w, &e.z, dz)),
        }
    }

    /// `(J_θ w)ᵀ` mapped back to a `δZ`-shaped cotangent.
    fn implicit_apply_transpose(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let e = self.eval;
        match e.implicit.as_ref().expect("reduced evaluation") {
            ImplicitJacobian::Ls { svd } => jacobian_w_ls_transpose(svd, &e.w, x, &e.ls_residual(), e.reg.alpha2),
            ImplicitJacobian::Ce(jac) => {
                let y = jacobian_w_ce_apply_transpose(jac, x);
                grad_w_theta_apply_transpose(&e.loss, &e.w, &e.z, &y)
            }
        }
    }

    /// Reduced: `W δZ + (J_θw δθ) Z`. Full: `δW Z + W δZ`. One forward pass.
    pub fn apply(&self, dx: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_dim(dx)?;
        let e = self.eval;
        match e.formulation {
            Formulation::Reduced => {
                let dz = self.net.jvp(&e.theta, &e.tape, dx)?;
                let dw = self.implicit_apply(&dz);
                Ok(&e.w * &dz + dw * &e.z)
            }
            Formulation::Full => {
                let nw = e.w.len();
                let dw = DMatrix::from_column_slice(e.w.nrows(), e.w.ncols(), &dx.as_slice()[..nw]);
                let dtheta = dx.rows(nw, e.theta.len()).into_owned();
                let dz = self.net.jvp(&e.theta, &e.tape, &dtheta)?;
                Ok(dw * &e.z + &e.w * dz)
            }
        }
    }

    /// Adjoint of [`JacHandle::apply`]. One backward pass.
    pub fn apply_transpose(&self, ds: &DMatrix<f64>) -> Result<DVector<f64>> {
        let e = self.eval;
        if ds.shape() != (e.w.nrows(), e.z.ncols()) {
            return Err(Error::ShapeMismatch(format!(
                "output cotangent {:?}, expected {:?}",
                ds.shape(),
                (e.w.nrows(), e.z.ncols())
            )));
        }
        match e.formulation {
            Formulation::Reduced => {
                let dz = e.w.transpose() * ds + self.implicit_apply_transpose(&(ds * e.z.transpose()));
                self.net.vjp(&e.theta, &e.tape, &dz)
            }
            Formulation::Full => {
                let gw = ds * e.z.transpose();
                let gt = self.net.vjp(&e.theta, &e.tape, &(e.w.transpose() * ds))?;
                Ok(concat(&gw, &gt))
            }
        }
    }

    /// Gauss-Newton curvature `Jᵀ ∇²L J v` plus the regularizer curvature.
    pub fn gn_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let jv = self.apply(v)?;
        let e = self.eval;
        let mut out = self.apply_transpose(&e.loss.hess_apply(&jv))?;
        match e.formulation {
            Formulation::Reduced => out += e.reg.theta_grad(v)?,
            Formulation::Full => {
                let nw = e.w.len();
                let mut w_part = out.rows_mut(0, nw);
                w_part += v.rows(0, nw) * e.reg.alpha2;
                let vt = v.rows(nw, e.theta.len()).into_owned();
                let mut t_part = out.rows_mut(nw, e.theta.len());
                t_part += e.reg.theta_grad(&vt)?;
            }
        }
        Ok(out)
    }
}

/// Pieces of the quadratic model along `dx`: `(gᵀdx, dxᵀ M dx)` with `M` the
/// Gauss-Newton curvature. The gradient must already be computed.
pub fn gn_model_apply(net: &Network, eval: &ObjectiveEval, dx: &DVector<f64>) -> Result<(f64, f64)> {
    let g = match eval.formulation {
        Formulation::Reduced => eval.grad_theta.clone(),
        Formulation::Full => eval.grad_theta.as_ref().map(|gt| concat(&eval.grad_w, gt)),
    }
    .ok_or_else(|| Error::InvalidInput("gradient not computed".into()))?;
    let m = eval.jacobian(net).gn_apply(dx)?;
    Ok((g.dot(dx), dx.dot(&m)))
}

/// `reduced_jac_apply` in free-function form.
pub fn reduced_jac_apply(handle: &JacHandle<'_>, dtheta: &DVector<f64>) -> Result<DMatrix<f64>> {
    handle.apply(dtheta)
}

/// `reduced_jac_applyT` in free-function form.
pub fn reduced_jac_apply_transpose(handle: &JacHandle<'_>, ds: &DMatrix<f64>) -> Result<DVector<f64>> {
    handle.apply_transpose(ds)
}
