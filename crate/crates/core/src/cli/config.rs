//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::data::{
    gen_ellipse, gen_synthetic_regression, read_csv, read_matrix_file, split, Dataset, EllipseSpec, TeacherSpec,
};
use crate::error::{Error, Result};
use crate::features::ArchSpec;
use crate::inner::InnerConfig;
use crate::loss::LossKind;
use crate::optim::{LevelSchedule, OptimizerConfig};
use crate::regularizer::RegWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Ellipse,
    Synthetic,
    Files,
}

/// `[data]`: a generator or a pair of matrix files with one sample per row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    #[serde(default)]
    pub n: usize,
    #[serde(default)]
    pub n_in: usize,
    #[serde(default)]
    pub n_target: usize,
    #[serde(default)]
    pub ellipse: EllipseSpec,
    #[serde(default)]
    pub teacher: TeacherSpec,
    pub inputs: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    /// Train, validation and test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_split() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

/// `[gradcheck]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub tolerances: Vec<f64>,
    pub ranks: Vec<usize>,
    pub h_min: f64,
    pub h_max: f64,
    pub points: usize,
    /// Start every inner solve from `W = 0`.
    pub cold_start: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { tolerances: vec![1e-10, 1e-2], ranks: vec![20], h_min: 1e-6, h_max: 1e-2, points: 9, cold_start: true }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Seeds of a comparison; `[seed]` when empty.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub arch: ArchSpec,
    pub loss: LossKind,
    #[serde(default)]
    pub regularization: RegWeights,
    #[serde(default)]
    pub inner: InnerConfig,
    pub levels: Option<LevelSchedule>,
    #[serde(default, rename = "optimizer")]
    pub optimizers: Vec<OptimizerConfig>,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Independent seed streams derived from the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ stream
}

pub const STREAM_DATA: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_OPTIM: u64 = 4;
pub const STREAM_PROBE: u64 = 5;

impl ExperimentConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.arch.validate().map_err(cfg_err)?;
        if !(self.regularization.alpha1 >= 0.0 && self.regularization.alpha2 >= 0.0) {
            return Err(Error::Config("regularization weights must be >= 0".into()));
        }
        if self.loss.is_cross_entropy() && !(self.regularization.alpha2 > 0.0) {
            return Err(Error::Config("cross-entropy losses need alpha2 > 0".into()));
        }
        if self.loss == LossKind::Logistic && self.data.n_target > 1 {
            return Err(Error::Config("logistic loss has a single target row".into()));
        }
        for o in &self.optimizers {
            o.validate()?;
        }
        if let Some(levels) = &self.levels {
            levels.validate().map_err(cfg_err)?;
            if self.arch.cells().is_none() {
                return Err(Error::Config("[levels] needs a neural_ode architecture".into()));
            }
        }
        let d = &self.data;
        match d.kind {
            DataKind::Ellipse | DataKind::Synthetic if d.n == 0 => {
                return Err(Error::Config("data.n must be positive".into()));
            }
            DataKind::Synthetic if d.n_in == 0 || d.n_target == 0 => {
                return Err(Error::Config("synthetic data needs n_in and n_target".into()));
            }
            DataKind::Files => {
                for (key, p) in [("inputs", &d.inputs), ("targets", &d.targets)] {
                    let p = p
                        .as_ref()
                        .ok_or_else(|| Error::Config(format!("data.{key} is required for kind = \"files\"")))?;
                    let full = self.resolve(p);
                    if !full.exists() {
                        return Err(Error::MissingFile(full));
                    }
                }
            }
            _ => {}
        }
        let g = &self.gradcheck;
        if g.points < 2 || !(0.0 < g.h_min && g.h_min < g.h_max) || g.h_max > 1e-2 {
            return Err(Error::Config("gradcheck needs points >= 2 and 0 < h_min < h_max <= 1e-2".into()));
        }
        Ok(())
    }

    /// Seeds a comparison iterates over.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    fn read_samples(&self, p: &Path) -> Result<DMatrix<f64>> {
        let path = self.resolve(p);
        let m = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            if !path.exists() {
                return Err(Error::MissingFile(path));
            }
            read_csv(std::io::BufReader::new(std::fs::File::open(&path)?))?
        } else {
            read_matrix_file(&path)?
        };
        Ok(m.transpose())
    }

    /// Builds and splits the dataset for `seed`, encoded for `self.loss`.
    pub fn dataset(&self, seed: u64) -> Result<Dataset> {
        let d = &self.data;
        let raw = match d.kind {
            DataKind::Ellipse => gen_ellipse(d.n, derive_seed(seed, STREAM_DATA), &d.ellipse)?,
            DataKind::Synthetic => {
                gen_synthetic_regression(d.n, d.n_in, d.n_target, &d.teacher, derive_seed(seed, STREAM_DATA))?
            }
            DataKind::Files => {
                let y = self.read_samples(d.inputs.as_ref().expect("validated"))?;
                let c = self.read_samples(d.targets.as_ref().expect("validated"))?;
                if y.ncols() != c.ncols() {
                    return Err(Error::Mismatch(format!("{} input rows but {} target rows", y.ncols(), c.ncols())));
                }
                self.loss.validate_targets(&c).map_err(|e| Error::Config(e.to_string()))?;
                Dataset::new(y, c, self.loss)?
            }
        };
        let encoded = match (raw.loss, self.loss) {
            (LossKind::Logistic, LossKind::Multinomial) => raw.to_multinomial()?,
            (LossKind::Logistic, LossKind::LeastSquares) => {
                Dataset { loss: LossKind::LeastSquares, ..raw.to_multinomial()? }
            }
            (a, b) if a == b => raw,
            (a, b) => return Err(Error::Config(format!("{a:?} data cannot be used with the {b:?} loss"))),
        };
        split(&encoded, d.split, derive_seed(seed, STREAM_SPLIT)).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ELLIPSE: &str = r#"
        seed = 3
        loss = "logistic"
        [data]
        kind = "ellipse"
        n = 40
        split = [0.5, 0.5, 0.0]
        [arch]
        kind = "neural_ode"
        n_in = 2
        width = 3
        final_time = 1.0
        cells = 2
        [regularization]
        alpha1 = 1e-4
        alpha2 = 1e-4
        [[optimizer]]
        method = "gn_tr"
        budget = 5.0
    "#;

    #[test]
    fn parses_example() {
        let cfg = ExperimentConfig::parse(ELLIPSE, Path::new(".")).unwrap();
        assert_eq!(cfg.optimizers.len(), 1);
        assert_eq!(cfg.optimizers[0].label(), "GNvpro");
        let d = cfg.dataset(cfg.seed).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d, cfg.dataset(cfg.seed).unwrap());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = ExperimentConfig::parse("seed = 1\nloss = \n", Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("line 2")), "{err}");
    }

    #[test]
    fn missing_files_are_reported() {
        let text =
            ELLIPSE.replace("kind = \"ellipse\"", "kind = \"files\"\ninputs = \"nope.vpm\"\ntargets = \"c.vpm\"");
        match ExperimentConfig::parse(&text, Path::new("/nonexistent")) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("nope.vpm")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::parse(&ELLIPSE.replace("seed = 3", "seed = 3\nsed = 4"), Path::new(".")).is_err());
    }
}
