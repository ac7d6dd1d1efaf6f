use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};

use super::arch::{ArchSpec, Layout};
use super::ode::{RK4_NODES, RK4_WEIGHTS};
use crate::error::{Error, Result};

/// Counts per-sample passes through the network: forward evaluations and
/// Jacobian applications are forward passes, transpose applications are
/// backward passes.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward: AtomicU64,
    backward: AtomicU64,
}

impl PassCounter {
    pub fn forward(&self) -> u64 {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn backward(&self) -> u64 {
        self.backward.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        self.forward() + self.backward()
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }

    fn add_forward(&self, samples: usize) {
        self.forward.fetch_add(samples as u64, Ordering::Relaxed);
    }

    fn add_backward(&self, samples: usize) {
        self.backward.fetch_add(samples as u64, Ordering::Relaxed);
    }
}

/// States stored by the most recent forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    fingerprint: u64,
    inputs: DMatrix<f64>,
    kind: TapeKind,
}

#[derive(Debug, Clone)]
enum TapeKind {
    /// Activations of every layer, input first.
    Mlp { activations: Vec<DMatrix<f64>> },
    /// Opening-layer output and, per time step, the four stage inputs and
    /// stage outputs.
    Ode { u0: DMatrix<f64>, stages: Vec<[(DMatrix<f64>, DMatrix<f64>); 4]> },
}

impl Tape {
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.ncols()
    }
}

fn fingerprint(theta: &DVector<f64>, y: &DMatrix<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    theta.len().hash(&mut h);
    for v in theta.iter() {
        v.to_bits().hash(&mut h);
    }
    y.shape().hash(&mut h);
    for v in y.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

fn add_bias(mut m: DMatrix<f64>, b: &[f64]) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        for (v, bi) in col.iter_mut().zip(b) {
            *v += bi;
        }
    }
    m
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum()))
}

/// `m += alpha · x`.
fn add_scaled(m: &mut DMatrix<f64>, alpha: f64, x: &DMatrix<f64>) {
    for (a, b) in m.iter_mut().zip(x.iter()) {
        *a += alpha * b;
    }
}

/// `(1 − t²) ⊙ m`, the tanh derivative evaluated from its output `t`.
fn tanh_deriv_mul(t: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    t.zip_map(m, |ti, mi| (1.0 - ti * ti) * mi)
}

/// A feature extractor bound to its architecture, with pass accounting.
#[derive(Debug)]
pub struct Network {
    arch: ArchSpec,
    layout: Layout,
    counter: PassCounter,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Network::new(self.arch.clone()).expect("already validated")
    }
}

struct OdeView<'a> {
    width: usize,
    n_in: usize,
    cells: usize,
    gamma: f64,
    step: f64,
    theta: &'a [f64],
}

impl OdeView<'_> {
    fn head(&self) -> usize {
        self.width * self.n_in + self.width
    }

    fn node_len(&self) -> usize {
        self.width * self.width + self.width
    }

    fn k_in(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.width, self.n_in, &self.theta[..self.width * self.n_in])
    }

    fn b_in(&self) -> &[f64] {
        &self.theta[self.width * self.n_in..self.head()]
    }

    fn k_node(&self, i: usize) -> DMatrix<f64> {
        let o = self.head() + i * self.node_len();
        DMatrix::from_column_slice(self.width, self.width, &self.theta[o..o + self.width * self.width])
    }

    fn b_node(&self, i: usize) -> DVector<f64> {
        let o = self.head() + i * self.node_len() + self.width * self.width;
        DVector::from_column_slice(&self.theta[o..o + self.width])
    }

    /// `A_i = K_i − K_iᵀ − γI`, or `dK_i − dK_iᵀ` when `shift` is false.
    fn a_node(&self, i: usize, shift: bool) -> DMatrix<f64> {
        let k = self.k_node(i);
        let mut a = &k - k.transpose();
        if shift {
            for d in 0..self.width {
                a[(d, d)] -= self.gamma;
            }
        }
        a
    }

    fn stage_weights(&self, shift: bool) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        (0..=self.cells).map(|i| (self.a_node(i, shift), self.b_node(i))).collect()
    }
}

fn interp(nodes: &[(DMatrix<f64>, DVector<f64>)], j: usize, c: f64) -> (DMatrix<f64>, DVector<f64>) {
    let (a0, b0) = &nodes[j];
    let (a1, b1) = &nodes[j + 1];
    if c == 0.0 {
        (a0.clone(), b0.clone())
    } else if c == 1.0 {
        (a1.clone(), b1.clone())
    } else {
        (a0 * (1.0 - c) + a1 * c, b0 * (1.0 - c) + b1 * c)
    }
}

impl Network {
    pub fn new(arch: ArchSpec) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        Ok(Self { arch, layout, counter: PassCounter::default() })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_weights(&self) -> usize {
        self.layout.len()
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "weights of length {} for layout of length {}",
                theta.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    fn check_tape(&self, theta: &DVector<f64>, tape: &Tape) -> Result<()> {
        self.check_theta(theta)?;
        if fingerprint(theta, &tape.inputs) != tape.fingerprint {
            return Err(Error::StaleTape);
        }
        Ok(())
    }

    fn ode_view<'a>(&self, theta: &'a DVector<f64>) -> Option<OdeView<'a>> {
        match &self.arch {
            ArchSpec::NeuralOde { n_in, width, final_time, cells, gamma } => Some(OdeView {
                width: *width,
                n_in: *n_in,
                cells: *cells,
                gamma: *gamma,
                step: final_time / *cells as f64,
                theta: theta.as_slice(),
            }),
            ArchSpec::Mlp { .. } => None,
        }
    }

    fn mlp_layer<'a>(&self, theta: &'a DVector<f64>, l: usize) -> (DMatrix<f64>, &'a [f64]) {
        let kb = &self.layout.blocks[2 * l];
        let bb = &self.layout.blocks[2 * l + 1];
        let k = DMatrix::from_column_slice(kb.rows, kb.cols, &theta.as_slice()[kb.range()]);
        (k, &theta.as_slice()[bb.range()])
    }

    /// Evaluates `Z = F(Y, θ)` and records a tape. Counts one forward pass
    /// per sample.
    pub fn forward(&self, theta: &DVector<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, Tape)> {
        let out = self.run_forward(theta, y)?;
        self.counter.add_forward(y.ncols());
        Ok(out)
    }

    /// Forward evaluation for reporting (validation metrics); not counted.
    pub fn predict(&self, theta: &DVector<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.run_forward(theta, y)?.0)
    }

    fn run_forward(&self, theta: &DVector<f64>, y: &DMatrix<f64>) -> Result<(DMatrix<f64>, Tape)> {
        self.check_theta(theta)?;
        if y.nrows() != self.arch.n_in() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} rows, architecture expects {}",
                y.nrows(),
                self.arch.n_in()
            )));
        }
        let finite = |m: &DMatrix<f64>, step: usize| {
            if m.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(Error::DivergedForward { step })
            }
        };
        let (z, kind) = match self.ode_view(theta) {
            None => {
                let ArchSpec::Mlp { widths } = &self.arch else { unreachable!() };
                let mut activations = vec![y.clone()];
                for l in 0..widths.len() - 1 {
                    let (k, b) = self.mlp_layer(theta, l);
                    let x = add_bias(&k * activations.last().expect("nonempty"), b).map(f64::tanh);
                    finite(&x, l)?;
                    activations.push(x);
                }
                (activations.last().expect("nonempty").clone(), TapeKind::Mlp { activations })
            }
            Some(v) => {
                let u0 = add_bias(v.k_in() * y, v.b_in()).map(f64::tanh);
                finite(&u0, 0)?;
                let nodes = v.stage_weights(true);
                let mut u = u0.clone();
                let mut stages = Vec::with_capacity(v.cells);
                for j in 0..v.cells {
                    let mut rec: Vec<(DMatrix<f64>, DMatrix<f64>)> = Vec::with_capacity(4);
                    let mut next = u.clone();
                    for s in 0..4 {
                        let input = match rec.last() {
                            None => u.clone(),
                            Some((_, k)) => &u + k * (v.step * RK4_NODES[s]),
                        };
                        let (a, b) = interp(&nodes, j, RK4_NODES[s]);
                        let k = add_bias(&a * &input, b.as_slice()).map(f64::tanh);
                        add_scaled(&mut next, v.step * RK4_WEIGHTS[s], &k);
                        rec.push((input, k));
                    }
                    finite(&next, j + 1)?;
                    u = next;
                    let rec: [(DMatrix<f64>, DMatrix<f64>); 4] = rec.try_into().expect("four stages");
                    stages.push(rec);
                }
                (u, TapeKind::Ode { u0, stages })
            }
        };
        let tape = Tape { fingerprint: fingerprint(theta, y), inputs: y.clone(), kind };
        Ok((z, tape))
    }

    /// `J_θF · δθ`, batch-stacked. Counts one forward pass per sample.
    pub fn jvp(&self, theta: &DVector<f64>, tape: &Tape, dtheta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_tape(theta, tape)?;
        self.check_theta(dtheta)?;
        let y = &tape.inputs;
        let out = match (&tape.kind, self.ode_view(theta), self.ode_view(dtheta)) {
            (TapeKind::Mlp { activations }, None, None) => {
                let mut dx = DMatrix::zeros(y.nrows(), y.ncols());
                for l in 0..activations.len() - 1 {
                    let (k, _) = self.mlp_layer(theta, l);
                    let (dk, db) = self.mlp_layer(dtheta, l);
                    let pre = add_bias(&dk * &activations[l] + &k * &dx, db);
                    dx = tanh_deriv_mul(&activations[l + 1], &pre);
                }
                dx
            }
            (TapeKind::Ode { u0, stages }, Some(v), Some(dv)) => {
                let pre = add_bias(dv.k_in() * y, dv.b_in());
                let mut du = tanh_deriv_mul(u0, &pre);
                let nodes = v.stage_weights(true);
                let dnodes = dv.stage_weights(false);
                for (j, rec) in stages.iter().enumerate() {
                    let mut dnext = du.clone();
                    let mut dk_prev: Option<DMatrix<f64>> = None;
                    for (s, (input, k)) in rec.iter().enumerate() {
                        let dinput = match &dk_prev {
                            None => du.clone(),
                            Some(dk) => &du + dk * (v.step * RK4_NODES[s]),
                        };
                        let (a, _) = interp(&nodes, j, RK4_NODES[s]);
                        let (da, db) = interp(&dnodes, j, RK4_NODES[s]);
                        let pre = add_bias(&da * input + &a * &dinput, db.as_slice());
                        let dk = tanh_deriv_mul(k, &pre);
                        add_scaled(&mut dnext, v.step * RK4_WEIGHTS[s], &dk);
                        dk_prev = Some(dk);
                    }
                    du = dnext;
                }
                du
            }
            _ => return Err(Error::StaleTape),
        };
        self.counter.add_forward(y.ncols());
        Ok(out)
    }

    /// `J_θFᵀ · dZ`. Counts one backward pass per sample.
    pub fn vjp(&self, theta: &DVector<f64>, tape: &Tape, dz: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_tape(theta, tape)?;
        let y = &tape.inputs;
        if dz.shape() != (self.arch.n_out(), y.ncols()) {
            return Err(Error::ShapeMismatch(format!(
                "cotangent {:?}, expected {:?}",
                dz.shape(),
                (self.arch.n_out(), y.ncols())
            )));
        }
        let mut grad = DVector::zeros(self.layout.len());
        match (&tape.kind, self.ode_view(theta)) {
            (TapeKind::Mlp { activations }, None) => {
                let mut g = dz.clone();
                for l in (0..activations.len() - 1).rev() {
                    let gp = tanh_deriv_mul(&activations[l + 1], &g);
                    let kb = &self.layout.blocks[2 * l];
                    let bb = &self.layout.blocks[2 * l + 1];
                    let gk = &gp * activations[l].transpose();
                    grad.rows_mut(kb.offset, kb.len()).copy_from_slice(gk.as_slice());
                    grad.rows_mut(bb.offset, bb.len()).copy_from(&row_sums(&gp));
                    let (k, _) = self.mlp_layer(theta, l);
                    g = k.tr_mul(&gp);
                }
            }
            (TapeKind::Ode { u0, stages }, Some(v)) => {
                let nodes = v.stage_weights(true);
                let w = v.width;
                let mut ga: Vec<DMatrix<f64>> = vec![DMatrix::zeros(w, w); v.cells + 1];
                let mut gb: Vec<DVector<f64>> = vec![DVector::zeros(w); v.cells + 1];
                let mut gu = dz.clone();
                for (j, rec) in stages.iter().enumerate().rev() {
                    // Cotangents of the stage outputs from the RK4 update.
                    let mut gk: [DMatrix<f64>; 4] = std::array::from_fn(|s| &gu * (v.step * RK4_WEIGHTS[s]));
                    let mut gu_prev = gu.clone();
                    for s in (0..4).rev() {
                        let (input, k) = &rec[s];
                        let c = RK4_NODES[s];
                        let (a, _) = interp(&nodes, j, c);
                        let gp = tanh_deriv_mul(k, &gk[s]);
                        let g_a = &gp * input.transpose();
                        let g_b = row_sums(&gp);
                        if c != 1.0 {
                            add_scaled(&mut ga[j], 1.0 - c, &g_a);
                            gb[j].axpy(1.0 - c, &g_b, 1.0);
                        }
                        if c != 0.0 {
                            add_scaled(&mut ga[j + 1], c, &g_a);
                            gb[j + 1].axpy(c, &g_b, 1.0);
                        }
                        let g_input = a.tr_mul(&gp);
                        gu_prev += &g_input;
                        if s > 0 {
                            let t = &g_input * (v.step * c);
                            gk[s - 1] += t;
                        }
                    }
                    gu = gu_prev;
                }
                let gp = tanh_deriv_mul(u0, &gu);
                let gk_in = &gp * y.transpose();
                let head_k = w * v.n_in;
                grad.rows_mut(0, head_k).copy_from_slice(gk_in.as_slice());
                grad.rows_mut(head_k, w).copy_from(&row_sums(&gp));
                for i in 0..=v.cells {
                    let o = v.head() + i * v.node_len();
                    let gk = &ga[i] - ga[i].transpose();
                    grad.rows_mut(o, w * w).copy_from_slice(gk.as_slice());
                    grad.rows_mut(o + w * w, w).copy_from(&gb[i]);
                }
            }
            _ => return Err(Error::StaleTape),
        }
        self.counter.add_backward(y.ncols());
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frob_dot;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn archs() -> Vec<ArchSpec> {
        vec![
            ArchSpec::Mlp { widths: vec![2, 4, 4, 2] },
            ArchSpec::NeuralOde { n_in: 3, width: 4, final_time: 2.0, cells: 3, gamma: 1e-4 },
        ]
    }

    #[test]
    fn zero_weight_special_cases() {
        let net = Network::new(ArchSpec::Mlp { widths: vec![2, 3, 2] }).unwrap();
        let y = DMatrix::from_fn(2, 5, |i, j| (i + j) as f64);
        let (z, _) = net.forward(&DVector::zeros(net.n_weights()), &y).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));

        // Zero vector field: the ODE leaves u(0) unchanged.
        let arch = ArchSpec::NeuralOde { n_in: 2, width: 2, final_time: 1.0, cells: 1, gamma: 0.0 };
        let net = Network::new(arch).unwrap();
        let mut theta = DVector::zeros(net.n_weights());
        theta.rows_mut(0, 6).copy_from_slice(&[0.5, -0.2, 0.3, 0.1, 0.05, -0.4]);
        let (z, _) = net.forward(&theta, &y).unwrap();
        let u0 = add_bias(DMatrix::from_column_slice(2, 2, &[0.5, -0.2, 0.3, 0.1]) * &y, &[0.05, -0.4]).map(f64::tanh);
        assert_eq!(z, u0);
    }

    #[test]
    fn ode_matches_scalar_rk4_hook() {
        use crate::features::rk4_step;
        let arch = ArchSpec::NeuralOde { n_in: 2, width: 3, final_time: 1.5, cells: 2, gamma: 0.1 };
        let net = Network::new(arch.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = arch.init_weights(&mut rng);
        let y = rand_mat(2, 1, &mut rng);
        let z = net.predict(&theta, &y).unwrap();
        let v = net.ode_view(&theta).unwrap();
        let nodes = v.stage_weights(true);
        let mut u = add_bias(v.k_in() * &y, v.b_in()).map(f64::tanh).column(0).into_owned();
        for j in 0..2 {
            let t0 = j as f64 * v.step;
            u = rk4_step(
                |t, x| {
                    let (a, b) = interp(&nodes, j, (t - t0) / v.step);
                    (a * x + b).map(f64::tanh)
                },
                t0,
                &u,
                v.step,
            );
        }
        assert!((z.column(0) - u).norm() < 1e-14);
    }

    #[test]
    fn deterministic_forward() {
        for arch in archs() {
            let net = Network::new(arch.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let theta = arch.init_weights(&mut rng);
            let y = rand_mat(arch.n_in(), 7, &mut rng);
            let a = net.predict(&theta, &y).unwrap();
            let b = net.predict(&theta, &y).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn jvp_is_linear_and_matches_finite_differences() {
        for arch in archs() {
            let net = Network::new(arch.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let theta = arch.init_weights(&mut rng);
            let y = rand_mat(arch.n_in(), 6, &mut rng);
            let (z, tape) = net.forward(&theta, &y).unwrap();
            let n = net.n_weights();
            assert_eq!(net.jvp(&theta, &tape, &DVector::zeros(n)).unwrap().norm(), 0.0);

            let d1 = rand_vec(n, &mut rng);
            let d2 = rand_vec(n, &mut rng);
            let lhs = net.jvp(&theta, &tape, &(&d1 * 2.0 - &d2 * 3.0)).unwrap();
            let rhs = net.jvp(&theta, &tape, &d1).unwrap() * 2.0 - net.jvp(&theta, &tape, &d2).unwrap() * 3.0;
            assert!((&lhs - &rhs).norm() <= 1e-12 * lhs.norm());

            // Forward-difference error must shrink linearly in h.
            let jd = net.jvp(&theta, &tape, &d1).unwrap();
            let err = |h: f64| {
                let zh = net.predict(&(&theta + &d1 * h), &y).unwrap();
                ((zh - &z) / h - &jd).norm()
            };
            let (e1, e2) = (err(1e-3), err(1e-4));
            let order = (e1 / e2).log10();
            assert!(order > 0.9, "{arch:?}: order {order}");
        }
    }

    #[test]
    fn vjp_gradient_of_half_squared_norm_passes_taylor() {
        for arch in archs() {
            let net = Network::new(arch.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let theta = arch.init_weights(&mut rng);
            let y = rand_mat(arch.n_in(), 4, &mut rng);
            let (z, tape) = net.forward(&theta, &y).unwrap();
            let f0 = 0.5 * z.norm_squared();
            let g = net.vjp(&theta, &tape, &z).unwrap();
            let d = rand_vec(net.n_weights(), &mut rng);
            let e =
                |h: f64| (0.5 * net.predict(&(&theta + &d * h), &y).unwrap().norm_squared() - f0 - h * g.dot(&d)).abs();
            let order = (e(1e-2) / e(1e-3)).log10();
            assert!(order >= 1.9, "{arch:?}: order {order}");
            assert_eq!(net.vjp(&theta, &tape, &DMatrix::zeros(z.nrows(), z.ncols())).unwrap().norm(), 0.0);
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let arch = archs().pop().unwrap();
        let net = Network::new(arch.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = arch.init_weights(&mut rng);
        let y = rand_mat(arch.n_in(), 3, &mut rng);
        let (_, tape) = net.forward(&theta, &y).unwrap();
        let moved = &theta * 1.01;
        assert!(matches!(net.jvp(&moved, &tape, &theta), Err(Error::StaleTape)));
        assert!(matches!(net.vjp(&moved, &tape, &DMatrix::zeros(4, 3)), Err(Error::StaleTape)));
    }

    #[test]
    fn diverged_forward_names_step() {
        let arch = ArchSpec::Mlp { widths: vec![1, 1] };
        let net = Network::new(arch).unwrap();
        let theta = DVector::from_vec(vec![f64::NAN, 0.0]);
        let r = net.forward(&theta, &DMatrix::from_element(1, 1, 1.0));
        assert!(matches!(r, Err(Error::DivergedForward { step: 0 })));
    }

    #[test]
    fn counters_track_passes() {
        let arch = archs().pop().unwrap();
        let net = Network::new(arch.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta = arch.init_weights(&mut rng);
        let y = rand_mat(arch.n_in(), 9, &mut rng);
        let (z, tape) = net.forward(&theta, &y).unwrap();
        net.jvp(&theta, &tape, &theta).unwrap();
        net.vjp(&theta, &tape, &z).unwrap();
        net.predict(&theta, &y).unwrap();
        assert_eq!(net.counter().forward(), 18);
        assert_eq!(net.counter().backward(), 9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn vjp_is_adjoint_of_jvp(seed in 0u64..10_000, which in 0usize..2, cells in 1usize..4, n in 1usize..6) {
            let arch = match which {
                0 => ArchSpec::Mlp { widths: vec![3, 5, 2] },
                _ => ArchSpec::NeuralOde { n_in: 2, width: 3, final_time: 1.0 + cells as f64, cells, gamma: 1e-4 },
            };
            let net = Network::new(arch.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = arch.init_weights(&mut rng) * 2.0;
            let y = rand_mat(arch.n_in(), n, &mut rng);
            let (_, tape) = net.forward(&theta, &y).unwrap();
            let dt = rand_vec(net.n_weights(), &mut rng);
            let s = rand_mat(arch.n_out(), n, &mut rng);
            let lhs = frob_dot(&net.jvp(&theta, &tape, &dt).unwrap(), &s);
            let rhs = dt.dot(&net.vjp(&theta, &tape, &s).unwrap());
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1e-300));
        }
    }
}
