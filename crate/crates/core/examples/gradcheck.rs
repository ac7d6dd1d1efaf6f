//! Taylor test of the reduced objective on the ellipse network for several
//! inner tolerances and Krylov ranks.
//!
//! `cargo run --release --example gradcheck`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpro::data::{gen_ellipse, EllipseSpec};
use vpro::features::ArchSpec;
use vpro::gradcheck::{h_grid, taylor_test};
use vpro::inner::InnerConfig;
use vpro::loss::LossKind;
use vpro::optim::ProblemSpec;
use vpro::reduced::Formulation;
use vpro::regularizer::RegWeights;

fn main() -> vpro::Result<()> {
    let data = gen_ellipse(200, 0, &EllipseSpec::default())?.to_multinomial()?;
    let arch = ArchSpec::Mlp { widths: vec![2, 4, 4, 2] };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = arch.init_weights(&mut rng);
    let dir = nalgebra::DVector::from_fn(theta.len(), |_, _| rng.random_range(-1.0..1.0));
    let hs = h_grid(1e-6, 1e-2, 9);

    println!("{:<13} {:>8} {:>6} {:>7}", "loss", "tol", "r_max", "slope");
    for loss in [LossKind::LeastSquares, LossKind::Multinomial] {
        for tol in [1e-10, 1e-6, 1e-2] {
            for r_max in [5, 15, 20] {
                let spec = ProblemSpec {
                    arch: arch.clone(),
                    loss,
                    reg: RegWeights { alpha1: 1e-4, alpha2: 1e-4 },
                    inner: InnerConfig { r_max, ..InnerConfig::default().with_tolerance(tol) },
                    train: (data.y.clone(), data.c.clone()),
                    validation: None,
                };
                let mut obj = spec.objective(&arch, Formulation::Reduced)?;
                obj.cold_start = true;
                let report = taylor_test(&mut obj, &theta, &dir, &hs)?;
                println!("{:<13} {:>8.0e} {:>6} {:>7.3}", format!("{loss:?}"), tol, r_max, report.slope);
            }
        }
    }
    Ok(())
}
