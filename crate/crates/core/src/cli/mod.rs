//! Command-line front end: `train`, `gradcheck` and `compare`.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error (including
//! missing files), 3 dataset/architecture mismatch, 4 optimizer stall or
//! divergence. Only summaries go to stdout; diagnostics go to stderr.

pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{derive_seed, DataConfig, DataKind, ExperimentConfig, GradcheckConfig};
use config::{STREAM_INIT, STREAM_OPTIM, STREAM_PROBE};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::features::{save_checkpoint, ArchSpec, Checkpoint, Network};
use crate::gradcheck::{h_grid, taylor_test, TaylorReport};
use crate::loss::LossKind;
use crate::optim::{run_multilevel, run_single, OptimizerConfig, ProblemSpec, RunResult, Status};
use crate::reduced::Formulation;

#[derive(Debug, Parser)]
#[command(name = "vpro", version, about = "Train separable models W·F(y, θ) by variable projection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every configured optimizer and write ledgers, checkpoints and a summary.
    Train(CommonArgs),
    /// Taylor-test the reduced gradient over inner tolerances and Krylov ranks.
    Gradcheck(CommonArgs),
    /// Run every optimizer on every seed from shared initializations.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Worker threads; results do not depend on this.
        #[arg(long, env = "VPRO_THREADS")]
        threads: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory; overrides `out_dir` in the configuration.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Seed; overrides `seed` (and `seeds`) in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::MissingFile(_) | Error::UnsupportedRefinement { .. } => 2,
        Error::Mismatch(_) | Error::ShapeMismatch(_) => 3,
        Error::Stall(_) => 4,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns the text printed to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Train(args) => {
            let (cfg, out) = prepare(args)?;
            train(&cfg, &out)
        }
        Command::Gradcheck(args) => {
            let (cfg, out) = prepare(args)?;
            gradcheck(&cfg, &out)
        }
        Command::Compare { common, threads } => {
            let (cfg, out) = prepare(common)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| compare(&cfg, &out))
        }
    }
}

fn prepare(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.seeds.clear();
    }
    let out = args
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(|p| cfg.base_dir.join(p)))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

/// Lower-case label with non-alphanumerics replaced by `-`.
pub fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect()
}

fn unique_labels(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    if cfg.optimizers.is_empty() {
        return Err(Error::Config("no [[optimizer]] sections".into()));
    }
    let labels: Vec<String> = cfg.optimizers.iter().map(OptimizerConfig::label).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].iter().any(|m| slug(m) == slug(l)) {
            return Err(Error::Config(format!("optimizer label {l:?} is used twice; set `name` to tell them apart")));
        }
    }
    Ok(labels)
}

/// First-level architecture.
fn initial_arch(cfg: &ExperimentConfig) -> Result<ArchSpec> {
    match &cfg.levels {
        Some(l) => cfg.arch.with_cells(l.depths[0]),
        None => Ok(cfg.arch.clone()),
    }
}

fn check_shapes(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.y.nrows() != cfg.arch.n_in() {
        return Err(Error::Mismatch(format!(
            "data has {} input features, architecture expects {}",
            data.y.nrows(),
            cfg.arch.n_in()
        )));
    }
    if data.count(Split::Train) == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    Ok(())
}

fn problem(cfg: &ExperimentConfig, data: &Dataset) -> ProblemSpec {
    ProblemSpec {
        arch: cfg.arch.clone(),
        loss: cfg.loss,
        reg: cfg.regularization,
        inner: cfg.inner,
        train: data.part(Split::Train),
        validation: (data.count(Split::Val) > 0).then(|| data.part(Split::Val)),
    }
}

fn initial_theta(cfg: &ExperimentConfig, seed: u64) -> Result<DVector<f64>> {
    Ok(initial_arch(cfg)?.init_weights(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT))))
}

fn run_arm(
    cfg: &ExperimentConfig,
    spec: &ProblemSpec,
    opt: &OptimizerConfig,
    theta0: &DVector<f64>,
    seed: u64,
) -> Result<RunResult> {
    let s = derive_seed(seed, STREAM_OPTIM);
    match &cfg.levels {
        Some(levels) => run_multilevel(spec, levels, opt, theta0, s),
        None => run_single(spec, opt, theta0, s),
    }
}

/// `‖W F(y, θ) − C‖ / ‖C‖`.
pub fn relative_error(run: &RunResult, y: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<f64> {
    let net = Network::new(run.arch.clone())?;
    let out = &run.w * net.predict(&run.theta, y)?;
    Ok((out - c).norm() / c.norm())
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Budget => "budget",
        Status::Converged => "converged",
        Status::MaxIter => "max_iter",
        Status::Stalled => "stalled",
        Status::Diverged => "diverged",
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), |x| format!("{x:.6e}"))
}

fn stall_error(labels: &[String]) -> Error {
    Error::Stall(format!("no progress for {}", labels.join(", ")))
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let labels = unique_labels(cfg)?;
    let seed = cfg.seed;
    let data = cfg.dataset(seed)?;
    check_shapes(cfg, &data)?;
    let spec = problem(cfg, &data);
    let theta0 = initial_theta(cfg, seed)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "command = train\nseed = {seed}\nn_train = {}", spec.train.0.ncols());
    let mut stalled = Vec::new();
    for (opt, label) in cfg.optimizers.iter().zip(&labels) {
        let run = run_arm(cfg, &spec, opt, &theta0, seed)?;
        let name = slug(label);
        let ledger_path = out.join(format!("ledger_{name}.csv"));
        let ck_path = out.join(format!("checkpoint_{name}.bin"));
        run.ledger.write_csv(&ledger_path)?;
        save_checkpoint(&ck_path, &Checkpoint { arch: run.arch.clone(), theta: run.theta.clone(), w: run.w.clone() })?;
        let last = run.ledger.last().ok_or_else(|| Error::Stall(format!("{label} recorded no iterations")))?;
        let m = &last.metrics;
        let _ = writeln!(summary, "[{label}]");
        let _ = writeln!(summary, "status = {}", status_name(run.status));
        let _ = writeln!(summary, "iterations = {}", last.iter);
        let _ = writeln!(summary, "work_units = {:.6e}", run.ledger.total_work_units());
        let _ = writeln!(summary, "train_loss = {:.6e}", m.train_loss);
        let _ = writeln!(summary, "train_acc = {}", opt_num(m.train_acc));
        let _ = writeln!(summary, "val_loss = {}", opt_num(m.val_loss));
        let _ = writeln!(summary, "val_acc = {}", opt_num(m.val_acc));
        if cfg.loss == LossKind::LeastSquares {
            if let Some((y, c)) = &spec.validation {
                let _ = writeln!(summary, "val_rel_err = {:.6e}", relative_error(&run, y, c)?);
            }
        }
        let _ = writeln!(summary, "ledger = {}", ledger_path.display());
        let _ = writeln!(summary, "checkpoint = {}", ck_path.display());
        if matches!(run.status, Status::Stalled | Status::Diverged) {
            stalled.push(label.clone());
        }
    }
    write_summary(out, &summary)?;
    if !stalled.is_empty() {
        print!("{summary}");
        return Err(stall_error(&stalled));
    }
    Ok(summary)
}

/// Writes `summary.txt`, the only output carrying a timestamp.
fn write_summary(out: &Path, summary: &str) -> Result<()> {
    let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
    std::fs::write(out.join("summary.txt"), format!("{summary}finished_unix = {secs}\n"))?;
    Ok(())
}

/// Taylor reports for every `(tolerance, r_max)` pair of `cfg.gradcheck`.
pub fn gradcheck_reports(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(f64, usize, TaylorReport)>> {
    let g = &cfg.gradcheck;
    let data = cfg.dataset(seed)?;
    check_shapes(cfg, &data)?;
    let mut spec = problem(cfg, &data);
    spec.validation = None;
    let theta = cfg.arch.init_weights(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT)));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PROBE));
    let dir = DVector::from_fn(theta.len(), |_, _| rng.random_range(-1.0..1.0));
    let hs = h_grid(g.h_min, g.h_max, g.points);
    let mut reports = Vec::new();
    for &tol in &g.tolerances {
        for &r_max in &g.ranks {
            spec.inner = crate::inner::InnerConfig { r_max, ..cfg.inner.with_tolerance(tol) };
            let mut obj = spec.objective(&cfg.arch, Formulation::Reduced)?;
            obj.cold_start = g.cold_start;
            reports.push((tol, r_max, taylor_test(&mut obj, &theta, &dir, &hs)?));
        }
    }
    Ok(reports)
}

fn gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let reports = gradcheck_reports(cfg, cfg.seed)?;
    let mut csv = String::from("tol,r_max,h,err0,err1\n");
    let mut summary = format!("{:>8} {:>6} {:>8}\n", "tol", "r_max", "slope");
    for (tol, r_max, rep) in &reports {
        for k in 0..rep.hs.len() {
            let _ = writeln!(csv, "{tol:e},{r_max},{:e},{:e},{:e}", rep.hs[k], rep.err0[k], rep.err1[k]);
        }
        let _ = writeln!(summary, "{tol:>8.0e} {r_max:>6} {:>8.3}", rep.slope);
    }
    std::fs::write(out.join("gradcheck.csv"), csv)?;
    write_summary(out, &summary)?;
    Ok(summary)
}

/// Final metrics of one `(arm, seed)` run.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub label: String,
    pub seed: u64,
    pub status: Status,
    pub work_units: f64,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_rel_err: Option<f64>,
    pub curve: String,
}

/// Runs every optimizer on every seed. Arms of one seed share data and
/// initial weights. The output order does not depend on scheduling.
pub fn compare_runs(cfg: &ExperimentConfig) -> Result<Vec<ArmResult>> {
    let labels = unique_labels(cfg)?;
    let jobs: Vec<(u64, usize)> =
        cfg.seed_list().into_iter().flat_map(|s| (0..labels.len()).map(move |a| (s, a))).collect();
    jobs.par_iter()
        .map(|&(seed, arm)| {
            let data = cfg.dataset(seed)?;
            check_shapes(cfg, &data)?;
            let spec = problem(cfg, &data);
            let theta0 = initial_theta(cfg, seed)?;
            let run = run_arm(cfg, &spec, &cfg.optimizers[arm], &theta0, seed)?;
            let val_rel_err = match (&spec.validation, cfg.loss) {
                (Some((y, c)), LossKind::LeastSquares) => Some(relative_error(&run, y, c)?),
                _ => None,
            };
            let last =
                run.ledger.last().ok_or_else(|| Error::Stall(format!("{} recorded no iterations", labels[arm])))?;
            let m = &last.metrics;
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
            let mut curve = String::new();
            for r in &run.ledger.rows {
                let _ = writeln!(
                    curve,
                    "{},{seed},{},{},{:e},{:e},{},{},{}",
                    labels[arm],
                    r.iter,
                    r.level,
                    run.ledger.work_units(r.passes),
                    r.metrics.train_loss,
                    opt(r.metrics.train_acc),
                    opt(r.metrics.val_loss),
                    opt(r.metrics.val_acc)
                );
            }
            Ok(ArmResult {
                label: labels[arm].clone(),
                seed,
                status: run.status,
                work_units: run.ledger.total_work_units(),
                train_loss: m.train_loss,
                train_acc: m.train_acc,
                val_loss: m.val_loss,
                val_acc: m.val_acc,
                val_rel_err,
                curve,
            })
        })
        .collect()
}

/// Median of the finite entries; `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn compare(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let results = compare_runs(cfg)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
    let mut curves = String::from("arm,seed,iter,level,work_units,train_loss,train_acc,val_loss,val_acc\n");
    let mut finals = String::from("arm,seed,status,work_units,train_loss,train_acc,val_loss,val_acc,val_rel_err\n");
    for r in &results {
        curves += &r.curve;
        let _ = writeln!(
            finals,
            "{},{},{},{:e},{:e},{},{},{},{}",
            r.label,
            r.seed,
            status_name(r.status),
            r.work_units,
            r.train_loss,
            opt(r.train_acc),
            opt(r.val_loss),
            opt(r.val_acc),
            opt(r.val_rel_err)
        );
    }
    std::fs::write(out.join("compare.csv"), curves)?;
    std::fs::write(out.join("compare_final.csv"), finals)?;

    let labels = unique_labels(cfg)?;
    let mut summary = format!(
        "{:<14} {:>5} {:>11} {:>11} {:>9} {:>11} {:>9} {:>11}\n",
        "arm", "runs", "median_wu", "train_loss", "train_acc", "val_loss", "val_acc", "val_rel_err"
    );
    let cell = |v: Option<f64>, w: usize, acc: bool| match v {
        Some(x) if acc => format!("{x:>w$.4}"),
        Some(x) => format!("{x:>w$.3e}"),
        None => format!("{:>w$}", "na"),
    };
    let mut stalled = Vec::new();
    for l in &labels {
        let rs: Vec<&ArmResult> = results.iter().filter(|r| &r.label == l).collect();
        let med = |f: &dyn Fn(&ArmResult) -> Option<f64>| median(rs.iter().filter_map(|r| f(r)));
        let _ = writeln!(
            summary,
            "{:<14} {:>5} {} {} {} {} {} {}",
            l,
            rs.len(),
            cell(med(&|r| Some(r.work_units)), 11, false),
            cell(med(&|r| Some(r.train_loss)), 11, false),
            cell(med(&|r| r.train_acc), 9, true),
            cell(med(&|r| r.val_loss), 11, false),
            cell(med(&|r| r.val_acc), 9, true),
            cell(med(&|r| r.val_rel_err), 11, false),
        );
        for r in rs {
            if matches!(r.status, Status::Stalled | Status::Diverged) {
                stalled.push(format!("{l} (seed {})", r.seed));
            }
        }
    }
    write_summary(out, &summary)?;
    if !stalled.is_empty() {
        print!("{summary}");
        return Err(stall_error(&stalled));
    }
    Ok(summary)
}
