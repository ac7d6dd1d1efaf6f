use nalgebra::{DMatrix, DVector};

/// Stage times of classical RK4 as fractions of the step.
pub const RK4_NODES: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
/// Quadrature weights of classical RK4.
pub const RK4_WEIGHTS: [f64; 4] = [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0];

/// One classical RK4 step of `u̇ = f(t, u)`.
pub fn rk4_step<F>(f: F, t: f64, u: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut out = u.clone();
    let mut prev: Option<DVector<f64>> = None;
    for s in 0..4 {
        let input = match &prev {
            None => u.clone(),
            Some(k) => u + k * (h * RK4_NODES[s]),
        };
        let k = f(t + RK4_NODES[s] * h, &input);
        out.axpy(h * RK4_WEIGHTS[s], &k, 1.0);
        prev = Some(k);
    }
    out
}

/// `tanh((K − Kᵀ − γI) u + b)`.
pub fn antisym_layer(u: &DVector<f64>, k: &DMatrix<f64>, b: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let a = k - k.transpose() - DMatrix::identity(k.nrows(), k.ncols()) * gamma;
    (a * u + b).map(f64::tanh)
}
