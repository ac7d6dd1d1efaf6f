use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the feature extractor. All activations are `tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    /// `widths = [N_in, h_1, …, N_out]`; every layer is `tanh(K x + b)`.
    Mlp { widths: Vec<usize> },
    /// Opening layer `tanh(K_in y + b_in)` followed by `cells` RK4 steps of
    /// the antisymmetric layer over `[0, final_time]`.
    NeuralOde {
        n_in: usize,
        width: usize,
        final_time: f64,
        cells: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_gamma() -> f64 {
    1e-4
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::InvalidInput(format!("bad MLP widths {widths:?}")));
                }
            }
            ArchSpec::NeuralOde { n_in, width, final_time, cells, gamma } => {
                if *n_in == 0 || *width == 0 {
                    return Err(Error::InvalidInput("neural ODE widths must be positive".into()));
                }
                if *cells == 0 {
                    return Err(Error::InvalidInput("neural ODE needs at least one cell".into()));
                }
                if !(*final_time > 0.0) {
                    return Err(Error::InvalidInput(format!("final time must be positive, got {final_time}")));
                }
                if !(*gamma >= 0.0) {
                    return Err(Error::InvalidInput(format!("gamma must be >= 0, got {gamma}")));
                }
            }
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        match self {
            ArchSpec::Mlp { widths } => widths[0],
            ArchSpec::NeuralOde { n_in, .. } => *n_in,
        }
    }

    /// Feature width `N_out`.
    pub fn n_out(&self) -> usize {
        match self {
            ArchSpec::Mlp { widths } => *widths.last().expect("validated"),
            ArchSpec::NeuralOde { width, .. } => *width,
        }
    }

    /// Number of time cells, `None` for an MLP.
    pub fn cells(&self) -> Option<usize> {
        match self {
            ArchSpec::NeuralOde { cells, .. } => Some(*cells),
            ArchSpec::Mlp { .. } => None,
        }
    }

    /// The same architecture with a different number of time cells.
    pub fn with_cells(&self, d: usize) -> Result<ArchSpec> {
        match self {
            ArchSpec::NeuralOde { n_in, width, final_time, gamma, .. } => {
                Ok(ArchSpec::NeuralOde { n_in: *n_in, width: *width, final_time: *final_time, cells: d, gamma: *gamma })
            }
            ArchSpec::Mlp { .. } => Err(Error::InvalidInput("an MLP has no time discretization".into())),
        }
    }

    pub fn layout(&self) -> Layout {
        let mut blocks = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize| {
            let offset = blocks.last().map_or(0, |b: &Block| b.offset + b.len());
            blocks.push(Block { name, offset, rows, cols });
        };
        match self {
            ArchSpec::Mlp { widths } => {
                for (l, pair) in widths.windows(2).enumerate() {
                    push(format!("K{l}"), pair[1], pair[0]);
                    push(format!("b{l}"), pair[1], 1);
                }
            }
            ArchSpec::NeuralOde { n_in, width, cells, .. } => {
                push("K_in".into(), *width, *n_in);
                push("b_in".into(), *width, 1);
                for i in 0..=*cells {
                    push(format!("K(t{i})"), *width, *width);
                    push(format!("b(t{i})"), *width, 1);
                }
            }
        }
        Layout { blocks }
    }

    /// Uniform `[−q, q]` entries with `q = 1/√fan_in` per block.
    pub fn init_weights<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let layout = self.layout();
        let mut theta = DVector::zeros(layout.len());
        for block in &layout.blocks {
            let fan_in = match self {
                ArchSpec::Mlp { widths } => {
                    let l: usize = block.name[1..].parse().expect("layer index");
                    widths[l]
                }
                ArchSpec::NeuralOde { n_in, width, .. } => {
                    if block.name.ends_with("_in") {
                        *n_in
                    } else {
                        *width
                    }
                }
            };
            let q = 1.0 / (fan_in as f64).sqrt();
            for v in theta.rows_mut(block.offset, block.len()).iter_mut() {
                *v = rng.random_range(-q..=q);
            }
        }
        theta
    }
}

/// A named slice of the flat weight vector holding a column-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// Flat weights together with the layout that names their blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub data: DVector<f64>,
    pub layout: Layout,
}

impl WeightVector {
    pub fn new(data: DVector<f64>, layout: Layout) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "weight vector of length {} for layout of length {}",
                data.len(),
                layout.len()
            )));
        }
        Ok(Self { data, layout })
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.data.as_slice()[b.range()])
    }
}

/// Piecewise-linear prolongation of node weights from `from_d` to
/// `to_d = 2·from_d` cells. `K_in` and `b_in` are copied.
pub fn prolongate(arch: &ArchSpec, theta: &DVector<f64>, from_d: usize, to_d: usize) -> Result<DVector<f64>> {
    let ArchSpec::NeuralOde { width, n_in, .. } = arch else {
        return Err(Error::InvalidInput("prolongation needs a neural ODE".into()));
    };
    if arch.cells() != Some(from_d) {
        return Err(Error::ShapeMismatch(format!(
            "architecture has {:?} cells, weights claimed for {from_d}",
            arch.cells()
        )));
    }
    if to_d != 2 * from_d {
        return Err(Error::UnsupportedRefinement { from: from_d, to: to_d });
    }
    let coarse = arch.layout();
    if theta.len() != coarse.len() {
        return Err(Error::ShapeMismatch(format!(
            "weights of length {} for layout of length {}",
            theta.len(),
            coarse.len()
        )));
    }
    let fine_arch = arch.with_cells(to_d)?;
    let fine = fine_arch.layout();
    let mut out = DVector::zeros(fine.len());
    let head = width * n_in + width;
    out.rows_mut(0, head).copy_from(&theta.rows(0, head));
    let node = width * width + width;
    for i in 0..=to_d {
        let dst = head + i * node;
        if i % 2 == 0 {
            let src = head + (i / 2) * node;
            out.rows_mut(dst, node).copy_from(&theta.rows(src, node));
        } else {
            let a = head + (i / 2) * node;
            let b = a + node;
            let mid = (theta.rows(a, node) + theta.rows(b, node)) * 0.5;
            out.rows_mut(dst, node).copy_from(&mid);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ode(cells: usize) -> ArchSpec {
        ArchSpec::NeuralOde { n_in: 1, width: 1, final_time: 1.0, cells, gamma: 0.0 }
    }

    #[test]
    fn layout_is_contiguous_and_exhaustive() {
        let arch = ArchSpec::NeuralOde { n_in: 3, width: 4, final_time: 2.0, cells: 2, gamma: 1e-4 };
        let l = arch.layout();
        assert_eq!(l.len(), 4 * 3 + 4 + 3 * (16 + 4));
        let mut next = 0;
        for b in &l.blocks {
            assert_eq!(b.offset, next);
            next += b.len();
        }
        let mlp = ArchSpec::Mlp { widths: vec![2, 4, 4, 2] };
        assert_eq!(mlp.layout().len(), 8 + 4 + 16 + 4 + 8 + 2);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let arch = ArchSpec::NeuralOde { n_in: 9, width: 4, final_time: 2.0, cells: 2, gamma: 1e-4 };
        let theta = arch.init_weights(&mut ChaCha8Rng::seed_from_u64(1));
        let l = arch.layout();
        let kin = l.block("K_in").unwrap();
        assert!(theta.rows(kin.offset, kin.len()).iter().all(|v| v.abs() <= 1.0 / 3.0));
        let k0 = l.block("K(t0)").unwrap();
        assert!(theta.rows(k0.offset, k0.len()).iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn prolongation_interpolates_linearly() {
        // K_in, b_in, then (K, b) at nodes t0 and t1.
        let theta = DVector::from_vec(vec![5.0, 6.0, 0.0, 10.0, 1.0, 20.0]);
        let fine = prolongate(&ode(1), &theta, 1, 2).unwrap();
        assert_eq!(fine.as_slice(), &[5.0, 6.0, 0.0, 10.0, 0.5, 15.0, 1.0, 20.0]);
    }

    #[test]
    fn prolongation_reproduces_linear_and_coarse_nodes() {
        let arch = ArchSpec::NeuralOde { n_in: 2, width: 2, final_time: 1.0, cells: 3, gamma: 0.0 };
        let l = arch.layout();
        let mut theta = arch.init_weights(&mut ChaCha8Rng::seed_from_u64(4));
        let node = 6;
        let head = 6;
        for i in 0..=3 {
            for k in 0..node {
                theta[head + i * node + k] = 1.0 + k as f64 + 0.5 * i as f64;
            }
        }
        let fine = prolongate(&arch, &theta, 3, 6).unwrap();
        for i in 0..=6 {
            for k in 0..node {
                let expected = 1.0 + k as f64 + 0.25 * i as f64;
                assert!((fine[head + i * node + k] - expected).abs() < 1e-15);
            }
        }
        for i in 0..=3 {
            assert_eq!(fine.rows(head + 2 * i * node, node), theta.rows(head + i * node, node));
        }
        assert_eq!(fine.rows(0, head), theta.rows(0, head));
        assert_eq!(l.len(), theta.len());
    }

    #[test]
    fn prolongation_rejects_non_doubling() {
        let theta = DVector::zeros(ode(2).layout().len());
        assert!(matches!(prolongate(&ode(2), &theta, 2, 3), Err(Error::UnsupportedRefinement { from: 2, to: 3 })));
    }
}
