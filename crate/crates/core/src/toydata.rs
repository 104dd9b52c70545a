//! Synthetic datasets with known structure.
//!
//! Unconditional datasets carry a zero condition column of width 1 so every
//! model has the same input layout.

use serde::{Deserialize, Serialize};

use crate::blob::Blob;
use crate::error::{Error, Result};
use crate::rng::{index, normal, seeded, uniform, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    /// Equal mixture of isotropic Gaussians at `(+-separation, 0)`.
    TwoGaussians { separation: f64, std: f64 },
    /// `modes` isotropic Gaussians evenly spaced on a circle.
    GaussianRing { modes: usize, radius: f64, std: f64 },
    /// Uniform on the dark cells of a `cells x cells` board over
    /// `[-half_width, half_width]^2`.
    Checkerboard { cells: usize, half_width: f64 },
    /// Conditional task: token `k` (one-hot condition) maps to
    /// `mu_k + A_k z` with `z ~ N(0, noise_var I)`. The anchors are fixed by
    /// `task_seed`.
    CondUpsample {
        tokens: usize,
        dim: usize,
        task_seed: u64,
        noise_var: f64,
    },
}

pub const KIND_NAMES: [&str; 4] = ["two_gaussians", "gaussian_ring", "checkerboard", "cond_upsample"];

impl DatasetKind {
    /// Default parameters for a kind by name.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "two_gaussians" => DatasetKind::TwoGaussians { separation: 2.0, std: 0.5 },
            "gaussian_ring" => DatasetKind::GaussianRing { modes: 8, radius: 2.0, std: 0.2 },
            "checkerboard" => DatasetKind::Checkerboard { cells: 4, half_width: 2.0 },
            "cond_upsample" => DatasetKind::CondUpsample {
                tokens: 16,
                dim: 8,
                task_seed: 7,
                noise_var: 0.1,
            },
            other => {
                return Err(Error::invalid(format!(
                    "unknown dataset kind {other:?}; valid kinds: {}",
                    KIND_NAMES.join(", ")
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::TwoGaussians { .. } => KIND_NAMES[0],
            DatasetKind::GaussianRing { .. } => KIND_NAMES[1],
            DatasetKind::Checkerboard { .. } => KIND_NAMES[2],
            DatasetKind::CondUpsample { .. } => KIND_NAMES[3],
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            DatasetKind::CondUpsample { dim, .. } => *dim,
            _ => 2,
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self {
            DatasetKind::CondUpsample { tokens, .. } => *tokens,
            _ => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            DatasetKind::TwoGaussians { separation, std } => separation.is_finite() && std > 0.0,
            DatasetKind::GaussianRing { modes, radius, std } => modes >= 1 && radius.is_finite() && std > 0.0,
            DatasetKind::Checkerboard { cells, half_width } => cells >= 2 && half_width > 0.0,
            DatasetKind::CondUpsample { tokens, dim, noise_var, .. } => tokens >= 1 && dim >= 1 && noise_var > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("bad parameters for {}: {self:?}", self.name())))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub y: Tensor,
    pub cond: Tensor,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            spec: DatasetSpec { n: idx.len(), ..self.spec },
            y: self.y.gather_rows(idx),
            cond: self.cond.gather_rows(idx),
        }
    }

    pub fn to_blob(&self) -> Result<Blob> {
        let mut b = Blob::new("dataset").with_hyperparameters(&self.spec)?;
        b.insert("y", self.y.clone());
        b.insert("cond", self.cond.clone());
        Ok(b)
    }

    pub fn from_blob(mut blob: Blob) -> Result<Self> {
        blob.expect_kind("dataset")?;
        let spec: DatasetSpec = blob.hyper()?;
        let y = blob.take("y")?;
        let cond = blob.take("cond")?;
        if y.rows() != cond.rows() || y.cols() != spec.kind.data_dim() || cond.cols() != spec.kind.cond_dim() {
            return Err(Error::Format {
                path: None,
                detail: "dataset tensors disagree with their spec".into(),
            });
        }
        Ok(Self { spec, y, cond })
    }
}

/// Fixed per-token anchors `(mu_k, A_k)` for the conditional task.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleAnchors {
    pub means: Vec<Vec<f64>>,
    /// Row-major `dim x dim` mixing matrices.
    pub mixing: Vec<Vec<f64>>,
}

pub fn upsample_anchors(tokens: usize, dim: usize, task_seed: u64) -> UpsampleAnchors {
    let mut rng = seeded(task_seed);
    let means = (0..tokens).map(|_| (0..dim).map(|_| 2.0 * normal(&mut rng)).collect()).collect();
    let scale = 0.5 / (dim as f64).sqrt();
    let mixing = (0..tokens)
        .map(|_| {
            (0..dim * dim)
                .map(|k| {
                    let diag = if k / dim == k % dim { 1.0 } else { 0.0 };
                    diag + scale * normal(&mut rng)
                })
                .collect()
        })
        .collect();
    UpsampleAnchors { means, mixing }
}

/// Whether `(x, y)` lies on a dark cell (cell indices summing to an even
/// number).
pub fn checkerboard_occupied(x: f64, y: f64, cells: usize, half_width: f64) -> bool {
    let w = 2.0 * half_width / cells as f64;
    let i = ((x + half_width) / w).floor();
    let j = ((y + half_width) / w).floor();
    if i < 0.0 || j < 0.0 || i >= cells as f64 || j >= cells as f64 {
        return false;
    }
    (i as usize + j as usize) % 2 == 0
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.kind.validate()?;
    if spec.n < 1 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    let mut rng = seeded(spec.seed);
    let n = spec.n;
    let (y, cond) = match spec.kind {
        DatasetKind::TwoGaussians { separation, std } => {
            let mut y = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let sign = if index(&mut rng, 2) == 0 { -1.0 } else { 1.0 };
                y.push(sign * separation + std * normal(&mut rng));
                y.push(std * normal(&mut rng));
            }
            (Tensor::new(vec![n, 2], y)?, Tensor::zeros(&[n, 1]))
        }
        DatasetKind::GaussianRing { modes, radius, std } => {
            let mut y = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let k = index(&mut rng, modes);
                let a = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
                y.push(radius * a.cos() + std * normal(&mut rng));
                y.push(radius * a.sin() + std * normal(&mut rng));
            }
            (Tensor::new(vec![n, 2], y)?, Tensor::zeros(&[n, 1]))
        }
        DatasetKind::Checkerboard { cells, half_width } => {
            let dark: Vec<(usize, usize)> = (0..cells)
                .flat_map(|i| (0..cells).map(move |j| (i, j)))
                .filter(|(i, j)| (i + j) % 2 == 0)
                .collect();
            let w = 2.0 * half_width / cells as f64;
            let mut y = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let (i, j) = dark[index(&mut rng, dark.len())];
                y.push(-half_width + w * (i as f64 + uniform(&mut rng)));
                y.push(-half_width + w * (j as f64 + uniform(&mut rng)));
            }
            (Tensor::new(vec![n, 2], y)?, Tensor::zeros(&[n, 1]))
        }
        DatasetKind::CondUpsample { tokens, dim, task_seed, noise_var } => {
            let anchors = upsample_anchors(tokens, dim, task_seed);
            let mut y = Vec::with_capacity(dim * n);
            let mut cond = Vec::with_capacity(tokens * n);
            let sd = noise_var.sqrt();
            for _ in 0..n {
                let k = index(&mut rng, tokens);
                let z: Vec<f64> = (0..dim).map(|_| sd * normal(&mut rng)).collect();
                let a = &anchors.mixing[k];
                for r in 0..dim {
                    let mixed: f64 = (0..dim).map(|c| a[r * dim + c] * z[c]).sum();
                    y.push(anchors.means[k][r] + mixed);
                }
                cond.extend(one_hot(k, tokens));
            }
            (Tensor::new(vec![n, dim], y)?, Tensor::new(vec![n, tokens], cond)?)
        }
    };
    Ok(Dataset { spec: *spec, y, cond })
}

/// Seeded shuffle-and-split by fractions. A split that is requested with a
/// positive fraction but ends up empty is an error.
pub fn split(data: &Dataset, fractions: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut seeded(seed));
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_eval = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let sizes = [n_train, n_eval, n - n_train - n_eval];
    for (i, (&s, &f)) in sizes.iter().zip(&fractions).enumerate() {
        if f > 0.0 && s == 0 {
            let name = ["train", "eval", "test"][i];
            return Err(Error::invalid(format!("{name} split is empty for {n} samples")));
        }
    }
    let (a, rest) = order.split_at(sizes[0]);
    let (b, c) = rest.split_at(sizes[1]);
    Ok([data.subset(a), data.subset(b), data.subset(c)])
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = index(rng, i + 1);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec { kind: DatasetKind::from_name(name).unwrap(), n, seed }
    }

    #[test]
    fn same_seed_same_data() {
        for name in KIND_NAMES {
            let a = generate(&spec(name, 200, 5)).unwrap();
            let b = generate(&spec(name, 200, 5)).unwrap();
            assert_eq!(a, b);
            let c = generate(&spec(name, 200, 6)).unwrap();
            assert_ne!(a.y, c.y);
        }
    }

    #[test]
    fn unknown_kind_lists_valid_ones() {
        let msg = DatasetKind::from_name("spirals").unwrap_err().to_string();
        for name in KIND_NAMES {
            assert!(msg.contains(name));
        }
    }

    #[test]
    fn two_gaussians_moments() {
        let d = generate(&spec("two_gaussians", 20_000, 1)).unwrap();
        let n = d.len() as f64;
        let mean_x: f64 = (0..d.len()).map(|i| d.y.row(i)[0]).sum::<f64>() / n;
        let var_y: f64 = (0..d.len()).map(|i| d.y.row(i)[1].powi(2)).sum::<f64>() / n;
        let var_x: f64 = (0..d.len()).map(|i| d.y.row(i)[0].powi(2)).sum::<f64>() / n - mean_x * mean_x;
        assert!(mean_x.abs() < 0.06);
        assert!((var_y - 0.25).abs() < 0.02);
        // 2^2 + 0.5^2 for the symmetric mixture
        assert!((var_x - 4.25).abs() < 0.1);
        assert_eq!(d.cond, Tensor::zeros(&[20_000, 1]));
    }

    #[test]
    fn checkerboard_samples_on_dark_cells() {
        let d = generate(&spec("checkerboard", 5000, 2)).unwrap();
        for i in 0..d.len() {
            let r = d.y.row(i);
            assert!(checkerboard_occupied(r[0], r[1], 4, 2.0), "{r:?}");
        }
    }

    #[test]
    fn ring_radius() {
        let d = generate(&spec("gaussian_ring", 5000, 3)).unwrap();
        let mean_r: f64 = (0..d.len()).map(|i| d.y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / 5000.0;
        assert!((mean_r - 2.0).abs() < 0.05);
    }

    #[test]
    fn cond_upsample_conditional_means() {
        let s = spec("cond_upsample", 8000, 4);
        let d = generate(&s).unwrap();
        let anchors = upsample_anchors(16, 8, 7);
        let mut sums = vec![vec![0.0; 8]; 16];
        let mut counts = vec![0usize; 16];
        for i in 0..d.len() {
            let k = d.cond.row(i).iter().position(|&v| v == 1.0).unwrap();
            assert_eq!(d.cond.row(i).iter().sum::<f64>(), 1.0);
            counts[k] += 1;
            for j in 0..8 {
                sums[k][j] += d.y.row(i)[j];
            }
        }
        for k in 0..16 {
            assert!(counts[k] > 300);
            for j in 0..8 {
                let m = sums[k][j] / counts[k] as f64;
                assert!((m - anchors.means[k][j]).abs() < 0.1, "token {k} dim {j}");
            }
        }
        // Anchors depend only on the task seed, not the sample seed.
        assert_eq!(anchors, upsample_anchors(16, 8, 7));
    }

    #[test]
    fn split_sizes_and_errors() {
        let d = generate(&spec("two_gaussians", 100, 1)).unwrap();
        let [a, b, c] = split(&d, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let again = split(&d, [0.8, 0.1, 0.1], 9).unwrap();
        assert_eq!(a, again[0]);
        let tiny = generate(&spec("two_gaussians", 3, 1)).unwrap();
        assert!(split(&tiny, [0.9, 0.05, 0.05], 1).is_err());
        assert!(split(&d, [0.5, 0.2, 0.2], 1).is_err());
        let [_, _, empty] = split(&d, [0.9, 0.1, 0.0], 1).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn blob_round_trip() {
        let d = generate(&spec("cond_upsample", 50, 1)).unwrap();
        let back = Dataset::from_blob(Blob::from_bytes(&d.to_blob().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, d);
    }
}
