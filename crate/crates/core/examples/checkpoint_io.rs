//! Writes a dataset as VPM1 matrices, trains on it, saves a checkpoint and
//! checks that the reloaded weights reproduce the predictions bit for bit.
//!
//! `cargo run --release --example checkpoint_io`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpro::data::{gen_ellipse, read_matrix_file, write_matrix_file, EllipseSpec};
use vpro::features::{load_checkpoint, save_checkpoint, ArchSpec, Checkpoint, Network};
use vpro::inner::InnerConfig;
use vpro::loss::LossKind;
use vpro::optim::{run_single, OptimizerConfig, ProblemSpec};
use vpro::regularizer::RegWeights;

fn main() -> vpro::Result<()> {
    let dir = std::env::temp_dir().join("vpro-checkpoint-example");
    std::fs::create_dir_all(&dir)?;

    let data = gen_ellipse(300, 0, &EllipseSpec::default())?;
    write_matrix_file(&dir.join("y.vpm"), &data.y)?;
    write_matrix_file(&dir.join("c.vpm"), &data.c)?;
    let (y, c) = (read_matrix_file(&dir.join("y.vpm"))?, read_matrix_file(&dir.join("c.vpm"))?);
    assert_eq!((&y, &c), (&data.y, &data.c));

    let arch = ArchSpec::NeuralOde { n_in: 2, width: 6, final_time: 3.0, cells: 4, gamma: 1e-4 };
    let spec = ProblemSpec {
        arch: arch.clone(),
        loss: LossKind::Logistic,
        reg: RegWeights { alpha1: 1e-5, alpha2: 1e-5 },
        inner: InnerConfig::default(),
        train: (y.clone(), c),
        validation: None,
    };
    let theta0 = arch.init_weights(&mut ChaCha8Rng::seed_from_u64(0));
    let run = run_single(&spec, &OptimizerConfig { budget: 100.0, ..Default::default() }, &theta0, 0)?;

    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &Checkpoint { arch: run.arch.clone(), theta: run.theta.clone(), w: run.w.clone() })?;
    let back = load_checkpoint(&path)?;
    let before = &run.w * Network::new(run.arch.clone())?.predict(&run.theta, &y)?;
    let after = &back.w * Network::new(back.arch.clone())?.predict(&back.theta, &y)?;
    println!(
        "trained {:?} for {:.1} WU; final train accuracy {:.4}",
        run.status,
        run.ledger.total_work_units(),
        run.ledger.last().and_then(|r| r.metrics.train_acc).unwrap_or(f64::NAN)
    );
    println!("checkpoint {} reloads identically: {}", path.display(), before == after);
    Ok(())
}
