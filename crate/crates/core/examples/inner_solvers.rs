//! The two inner solvers on random features: the closed-form least-squares
//! solve and the Newton-Krylov trust region for cross-entropy, cold and warm
//! started.
//!
//! `cargo run --release --example inner_solvers`

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpro::inner::{solve_ce, solve_ls, InnerConfig, InnerProblem};
use vpro::loss::LossKind;

fn main() -> vpro::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n_out, t, classes) = (16, 500, 4);
    let z = DMatrix::from_fn(n_out, t, |_, _| rng.random_range(-1.0..1.0));

    let c = DMatrix::from_fn(3, t, |_, _| rng.random_range(-1.0..1.0));
    let ls = solve_ls(&InnerProblem { z: &z, c: &c, loss: LossKind::LeastSquares, alpha2: 1e-6 })?;
    println!("least squares   value {:.6e}  gradient norm {:.2e}", ls.value, ls.grad_norm);

    let mut labels = DMatrix::zeros(classes, t);
    for j in 0..t {
        let k = (0..classes).max_by(|&a, &b| z[(a, j)].total_cmp(&z[(b, j)])).unwrap_or(0);
        labels[(k, j)] = 1.0;
    }
    let cfg = InnerConfig::default();
    let p = InnerProblem { z: &z, c: &labels, loss: LossKind::Multinomial, alpha2: 1e-3 };
    let cold = solve_ce(&p, &DMatrix::zeros(classes, n_out), &cfg)?;
    println!(
        "multinomial     value {:.6e}  gradient norm {:.2e}  iterations {}  ranks {:?}",
        cold.value, cold.grad_norm, cold.iterations, cold.ranks
    );

    // A small change of the features, as between two outer iterations.
    let z2 = &z + DMatrix::from_fn(n_out, t, |_, _| rng.random_range(-0.01..0.01));
    let p2 = InnerProblem { z: &z2, ..p };
    let warm = solve_ce(&p2, &cold.w, &cfg)?;
    let again = solve_ce(&p2, &DMatrix::zeros(classes, n_out), &cfg)?;
    println!("after perturbation: warm start {} iterations, cold start {}", warm.iterations, again.iterations);
    Ok(())
}
