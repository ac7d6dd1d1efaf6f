//! Regression on noiseless data from a random teacher network. GN on the
//! reduced objective is compared with ADAM, which receives twice the work
//! units.
//!
//! `cargo run --release --example surrogate -- [seed] [budget]`

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpro::data::{gen_synthetic_regression, split, Split, TeacherSpec};
use vpro::features::{ArchSpec, Network};
use vpro::inner::InnerConfig;
use vpro::loss::LossKind;
use vpro::optim::{run_single, Method, OptimizerConfig, ProblemSpec, RunResult};
use vpro::reduced::Formulation;
use vpro::regularizer::RegWeights;

fn relative_error(run: &RunResult, y: &DMatrix<f64>, c: &DMatrix<f64>) -> vpro::Result<f64> {
    let net = Network::new(run.arch.clone())?;
    let out = &run.w * net.predict(&run.theta, y)?;
    Ok((out - c).norm() / c.norm())
}

fn main() -> vpro::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let budget: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200.0);

    let teacher = TeacherSpec { hidden: 16, weight_scale: 1.0 };
    let data = split(&gen_synthetic_regression(800, 4, 3, &teacher, seed)?, [0.5, 0.25, 0.25], seed)?;
    let arch = ArchSpec::NeuralOde { n_in: 4, width: 8, final_time: 2.0, cells: 4, gamma: 1e-4 };
    let spec = ProblemSpec {
        arch: arch.clone(),
        loss: LossKind::LeastSquares,
        reg: RegWeights { alpha1: 1e-10, alpha2: 1e-10 },
        inner: InnerConfig::default(),
        train: data.part(Split::Train),
        validation: Some(data.part(Split::Val)),
    };
    let theta0 = arch.init_weights(&mut ChaCha8Rng::seed_from_u64(seed));
    let (yv, cv) = data.part(Split::Val);

    let arms = [
        OptimizerConfig { method: Method::GnTr, formulation: Formulation::Reduced, budget, ..Default::default() },
        OptimizerConfig { method: Method::Adam, budget: 2.0 * budget, ..Default::default() },
    ];
    for cfg in arms {
        let cfg = OptimizerConfig { stagnation_stop: false, ..cfg };
        let run = run_single(&spec, &cfg, &theta0, seed)?;
        let last = run.ledger.last().expect("ledger has rows");
        println!(
            "{:<8} WU {:>7.1}  train loss {:.3e}  val loss {:.3e}  val rel err {:.3e}",
            run.label,
            run.ledger.total_work_units(),
            last.metrics.train_loss,
            last.metrics.val_loss.unwrap_or(f64::NAN),
            relative_error(&run, &yv, &cv)?
        );
    }
    Ok(())
}
