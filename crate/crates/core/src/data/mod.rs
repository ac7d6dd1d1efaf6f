//! Datasets, generators, splitting and matrix files.

mod io;

pub use io::{read_csv, read_matrix, read_matrix_file, write_matrix, write_matrix_file};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Columns of `y` and `c` are samples; `split` tags each column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub split: Vec<Split>,
    /// Loss the targets are encoded for.
    pub loss: LossKind,
}

impl Dataset {
    /// All columns tagged `Train`.
    pub fn new(y: DMatrix<f64>, c: DMatrix<f64>, loss: LossKind) -> Result<Self> {
        if y.ncols() != c.ncols() {
            return Err(Error::ShapeMismatch(format!("{} inputs but {} targets", y.ncols(), c.ncols())));
        }
        loss.validate_targets(&c)?;
        let split = vec![Split::Train; y.ncols()];
        Ok(Self { y, c, split, loss })
    }

    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.y.ncols() == 0
    }

    pub fn count(&self, s: Split) -> usize {
        self.split.iter().filter(|&&t| t == s).count()
    }

    /// Columns tagged `s`, in dataset order.
    pub fn part(&self, s: Split) -> (DMatrix<f64>, DMatrix<f64>) {
        let idx: Vec<usize> = (0..self.len()).filter(|&j| self.split[j] == s).collect();
        (self.y.select_columns(&idx), self.c.select_columns(&idx))
    }

    /// Re-encodes `{0, 1}` logistic targets as two-class simplex columns.
    pub fn to_multinomial(&self) -> Result<Self> {
        if self.loss != LossKind::Logistic {
            return Err(Error::InvalidInput("only logistic targets can be re-encoded".into()));
        }
        let c = DMatrix::from_fn(2, self.len(), |k, j| if (self.c[(0, j)] > 0.5) == (k == 1) { 1.0 } else { 0.0 });
        Ok(Self { y: self.y.clone(), c, split: self.split.clone(), loss: LossKind::Multinomial })
    }
}

/// Ellipse membership task: `c = 0` inside, `c = 1` outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EllipseSpec {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Rotation in radians.
    pub angle: f64,
    /// Points are drawn from `[−b, b]²` around the origin.
    pub half_box: f64,
}

impl Default for EllipseSpec {
    fn default() -> Self {
        Self { center: [0.0, 0.0], semi_axes: [1.0, 0.5], angle: 0.0, half_box: 2.0 }
    }
}

impl EllipseSpec {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        (u / self.semi_axes[0]).powi(2) + (v / self.semi_axes[1]).powi(2) <= 1.0
    }
}

pub fn gen_ellipse(n: usize, seed: u64, spec: &EllipseSpec) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 samples, got {n}")));
    }
    if !(spec.semi_axes[0] > 0.0 && spec.semi_axes[1] > 0.0) || !(spec.half_box > 0.0) {
        return Err(Error::InvalidInput(format!("degenerate ellipse {:?}", spec.semi_axes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = spec.half_box;
    let y = DMatrix::from_fn(2, n, |_, _| rng.random_range(-b..b));
    let c = DMatrix::from_fn(1, n, |_, j| if spec.contains([y[(0, j)], y[(1, j)]]) { 0.0 } else { 1.0 });
    Dataset::new(y, c, LossKind::Logistic)
}

/// Frozen two-layer teacher `c = A tanh(K y + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherSpec {
    pub hidden: usize,
    /// Standard deviation of the teacher weights.
    pub weight_scale: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self { hidden: 16, weight_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub k: DMatrix<f64>,
    pub b: DVector<f64>,
    pub a: DMatrix<f64>,
}

impl Teacher {
    pub fn new(n_in: usize, n_target: usize, spec: &TeacherSpec, rng: &mut ChaCha8Rng) -> Self {
        let s = spec.weight_scale;
        let mut normal = |r, c| DMatrix::from_fn(r, c, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        let k = normal(spec.hidden, n_in);
        let b = normal(spec.hidden, 1).column(0).into_owned();
        let a = normal(n_target, spec.hidden) / (spec.hidden as f64).sqrt();
        Self { k, b, a }
    }

    /// Hidden features `tanh(K y + b)`.
    pub fn features(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut pre = &self.k * y;
        for mut col in pre.column_iter_mut() {
            col += &self.b;
        }
        pre.map(f64::tanh)
    }

    pub fn eval(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * self.features(y)
    }
}

/// Noiseless regression data from a random teacher; inputs uniform on
/// `[−1, 1]^{N_in}`.
pub fn gen_synthetic_regression(
    n: usize,
    n_in: usize,
    n_target: usize,
    teacher: &TeacherSpec,
    seed: u64,
) -> Result<Dataset> {
    Ok(gen_synthetic_with_teacher(n, n_in, n_target, teacher, seed)?.0)
}

/// [`gen_synthetic_regression`] that also returns the teacher.
pub fn gen_synthetic_with_teacher(
    n: usize,
    n_in: usize,
    n_target: usize,
    teacher: &TeacherSpec,
    seed: u64,
) -> Result<(Dataset, Teacher)> {
    if n == 0 || n_in == 0 || n_target == 0 || teacher.hidden == 0 {
        return Err(Error::InvalidInput("synthetic regression sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Teacher::new(n_in, n_target, teacher, &mut rng);
    let y = DMatrix::from_fn(n_in, n, |_, _| rng.random_range(-1.0..1.0));
    let c = t.eval(&y);
    Ok((Dataset::new(y, c, LossKind::LeastSquares)?, t))
}

/// Random permutation followed by contiguous train/val/test assignment.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Dataset> {
    if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let n = dataset.len();
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let counts = [n_train, n_val, n - n_train - n_val];
    for (k, (&f, &cnt)) in fractions.iter().zip(&counts).enumerate() {
        if f > 0.0 && cnt == 0 {
            let name = ["train", "val", "test"][k];
            return Err(Error::InvalidInput(format!("{name} split of {n} samples at fraction {f} is empty")));
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut tags = vec![Split::Test; n];
    for (pos, &j) in perm.iter().enumerate() {
        tags[j] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(Dataset { split: tags, ..dataset.clone() })
}
