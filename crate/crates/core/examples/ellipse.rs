//! Ellipse classification with a neural ODE trained on a 2/4/8 time-step
//! hierarchy: GN on the reduced objective against L-BFGS and full GN at an
//! equal work-unit budget.
//!
//! `cargo run --release --example ellipse -- [seed] [budget]`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpro::data::{gen_ellipse, split, EllipseSpec, Split};
use vpro::features::ArchSpec;
use vpro::inner::InnerConfig;
use vpro::loss::LossKind;
use vpro::optim::{run_multilevel, LevelSchedule, Method, OptimizerConfig, ProblemSpec};
use vpro::reduced::Formulation;
use vpro::regularizer::RegWeights;

fn main() -> vpro::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let budget: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600.0);

    let data = split(&gen_ellipse(1000, seed, &EllipseSpec::default())?, [0.5, 0.5, 0.0], seed)?;
    let arch = ArchSpec::NeuralOde { n_in: 2, width: 8, final_time: 4.0, cells: 2, gamma: 1e-4 };
    let spec = ProblemSpec {
        arch: arch.clone(),
        loss: LossKind::Logistic,
        reg: RegWeights { alpha1: 1e-6, alpha2: 1e-6 },
        inner: InnerConfig::default(),
        train: data.part(Split::Train),
        validation: Some(data.part(Split::Val)),
    };
    let theta0 = arch.init_weights(&mut ChaCha8Rng::seed_from_u64(seed));
    let schedule = LevelSchedule::even(vec![2, 4, 8], budget);

    for (method, formulation) in
        [(Method::GnTr, Formulation::Reduced), (Method::Lbfgs, Formulation::Reduced), (Method::GnTr, Formulation::Full)]
    {
        let cfg = OptimizerConfig { method, formulation, stagnation_stop: false, ..Default::default() };
        let run = run_multilevel(&spec, &schedule, &cfg, &theta0, seed)?;
        let last = run.ledger.last().expect("ledger has rows");
        println!(
            "{:<12} WU {:>7.1}  train loss {:.3e}  train acc {:.4}  val acc {:.4}  ({:?})",
            run.label,
            run.ledger.total_work_units(),
            last.metrics.train_loss,
            last.metrics.train_acc.unwrap_or(f64::NAN),
            last.metrics.val_acc.unwrap_or(f64::NAN),
            run.status
        );
    }
    Ok(())
}
