//! Labeled datasets, toy regression generators, IDX ingestion, synthetic
//! out-of-distribution noise, and reference-set selection.

pub mod idx;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::Tensor;

/// Regression values or class ids.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes {
        labels: Vec<usize>,
        num_classes: usize,
    },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes {
                labels,
                num_classes,
            } => Targets::Classes {
                labels: rows.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(v) => Targets::Values(rows.iter().map(|&i| v[i]).collect()),
        }
    }

    /// One-hot rows for classification, a single column for regression.
    pub fn encode(&self, task: TaskKind) -> Result<Tensor> {
        match (self, task) {
            (Targets::Classes { labels, .. }, TaskKind::Classification { num_classes }) => {
                let mut data = vec![0.0; labels.len() * num_classes];
                for (i, &c) in labels.iter().enumerate() {
                    if c >= num_classes {
                        return Err(Error::invalid(format!(
                            "class id {c} out of range for {num_classes} classes"
                        )));
                    }
                    data[i * num_classes + c] = 1.0;
                }
                Ok(Tensor::matrix(labels.len(), num_classes, data))
            }
            (Targets::Values(v), TaskKind::Regression) => Ok(Tensor::column(v.clone())),
            _ => Err(Error::invalid("targets do not match the task kind")),
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Targets::Values(v) => Some(v),
            Targets::Classes { .. } => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Inputs, targets, and a split tag per row. Row indices double as point
/// identities.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub splits: Vec<Split>,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, targets: Targets, splits: Vec<Split>) -> Result<Self> {
        if inputs.shape().len() != 2
            || inputs.rows() != targets.len()
            || splits.len() != targets.len()
        {
            return Err(Error::invalid(format!(
                "dataset rows disagree: inputs {:?}, {} targets, {} split tags",
                inputs.shape(),
                targets.len(),
                splits.len()
            )));
        }
        if let Targets::Classes {
            labels,
            num_classes,
        } = &targets
        {
            if let Some(bad) = labels.iter().find(|&&c| c >= *num_classes) {
                return Err(Error::invalid(format!("class id {bad} >= {num_classes}")));
            }
        }
        Ok(LabeledDataset {
            inputs,
            targets,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Inputs of the given rows as a matrix.
    pub fn rows(&self, rows: &[usize]) -> Tensor {
        self.inputs.select_rows(rows)
    }

    /// The given rows as a [`PointSet`] keyed by row index.
    pub fn points(&self, rows: &[usize]) -> PointSet {
        PointSet {
            inputs: self.rows(rows),
            targets: self.targets.subset(rows),
            ids: rows.iter().map(|&i| i as u64).collect(),
        }
    }

    pub fn task(&self) -> TaskKind {
        match &self.targets {
            Targets::Classes { num_classes, .. } => TaskKind::Classification {
                num_classes: *num_classes,
            },
            Targets::Values(_) => TaskKind::Regression,
        }
    }
}

/// Rows of a dataset together with their point identities.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub inputs: Tensor,
    pub targets: Targets,
    pub ids: Vec<u64>,
}

impl PointSet {
    pub fn new(inputs: Tensor, targets: Targets, ids: Vec<u64>) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != targets.len() || ids.len() != targets.len()
        {
            return Err(Error::invalid(format!(
                "point set rows disagree: inputs {:?}, {} targets, {} ids",
                inputs.shape(),
                targets.len(),
                ids.len()
            )));
        }
        Ok(PointSet {
            inputs,
            targets,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> PointSet {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(self.inputs.row(i));
        }
        PointSet {
            inputs: Tensor::matrix(rows.len(), d, data),
            targets: self.targets.subset(rows),
            ids: rows.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Same points ordered by identity.
    pub fn sorted(&self) -> PointSet {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.ids[i]);
        self.select(&order)
    }
}

/// `y = x + ε + sin(4(x + ε)) + sin(13(x + ε))`.
pub fn toy1_target(x: f64, eps: f64) -> f64 {
    let s = x + eps;
    s + (4.0 * s).sin() + (13.0 * s).sin()
}

/// `y = x³ + ε`.
pub fn toy2_target(x: f64, eps: f64) -> f64 {
    x.powi(3) + eps
}

fn regression_set(xs: Vec<f64>, ys: Vec<f64>) -> LabeledDataset {
    let n = xs.len();
    LabeledDataset::new(
        Tensor::column(xs),
        Targets::Values(ys),
        vec![Split::Train; n],
    )
    .expect("consistent toy data")
}

/// Twelve points from U[0, 0.6] and eight from U[0.8, 1], noise N(0, 0.03²).
pub fn gen_toy1(seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut xs: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..=0.6)).collect();
    xs.extend((0..8).map(|_| rng.random_range(0.8..=1.0)));
    let ys = xs
        .iter()
        .map(|&x| toy1_target(x, rng.sample(noise)))
        .collect();
    regression_set(xs, ys)
}

/// Twenty points from U[−4, 4], `y = x³ + ε`, `ε ~ N(0, 9)`.
pub fn gen_toy2(seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 3.0).unwrap();
    let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-4.0..=4.0)).collect();
    let ys = xs
        .iter()
        .map(|&x| toy2_target(x, rng.sample(noise)))
        .collect();
    regression_set(xs, ys)
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]` and every
/// row is tagged `split`.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<LabeledDataset> {
    let img = idx::read_images(images)?;
    let lab = idx::read_labels(labels)?;
    if img.count != lab.len() {
        return Err(idx::IdxError::CountMismatch {
            images: img.count,
            labels: lab.len(),
        }
        .into());
    }
    let d = img.rows * img.cols;
    let data = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let num_classes = lab
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1)
        .max(10);
    LabeledDataset::new(
        Tensor::matrix(img.count, d, data),
        Targets::Classes {
            labels: lab.iter().map(|&l| l as usize).collect(),
            num_classes,
        },
        vec![split; img.count],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Gaussian,
    Uniform,
}

/// `count × dim` i.i.d. N(0, 1) or U[0, 1] inputs.
pub fn gen_ood_noise(kind: NoiseKind, dim: usize, count: usize, seed: u64) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::invalid("o.o.d. set needs at least one point"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..count * dim)
        .map(|_| match kind {
            NoiseKind::Gaussian => rng.sample(StandardNormal),
            NoiseKind::Uniform => rng.random_range(0.0..=1.0),
        })
        .collect();
    Ok(Tensor::matrix(count, dim, data))
}

/// Reference set `R` and its complement `M` within the training rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSplit {
    pub base: LabeledDataset,
    pub reference: Vec<usize>,
    pub remainder: Vec<usize>,
}

impl ReferenceSplit {
    pub fn new(base: LabeledDataset, reference: Vec<usize>, remainder: Vec<usize>) -> Result<Self> {
        let split = ReferenceSplit {
            base,
            reference,
            remainder,
        };
        split.check()?;
        Ok(split)
    }

    /// `R ∩ M = ∅`, `R ∪ M` = training rows, `|R| ≥ 1`.
    pub fn check(&self) -> Result<()> {
        if self.reference.is_empty() {
            return Err(Error::invalid("the reference set is empty"));
        }
        let mut seen = vec![false; self.base.len()];
        for &i in self.reference.iter().chain(&self.remainder) {
            if i >= self.base.len() || seen[i] {
                return Err(Error::invalid(format!("row {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        let train = self.base.indices(Split::Train);
        if train.len() != self.reference.len() + self.remainder.len()
            || train.iter().any(|&i| !seen[i])
        {
            return Err(Error::invalid("R ∪ M must cover exactly the training rows"));
        }
        Ok(())
    }

    pub fn validation(&self) -> Vec<usize> {
        self.base.indices(Split::Val)
    }

    pub fn test(&self) -> Vec<usize> {
        self.base.indices(Split::Test)
    }

    /// Moves `fraction` of `M` (at least one point when `fraction > 0`) to the
    /// validation split by seeded shuffle.
    pub fn hold_out_validation(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!(
                "validation fraction {fraction} not in [0, 1)"
            )));
        }
        if fraction == 0.0 || self.remainder.is_empty() {
            return Ok(self);
        }
        let count = ((self.remainder.len() as f64 * fraction).round() as usize).max(1);
        let mut order = self.remainder.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for &i in &order[..count] {
            self.base.splits[i] = Split::Val;
        }
        self.remainder
            .retain(|&i| self.base.splits[i] == Split::Train);
        self.check()?;
        Ok(self)
    }
}

/// Uniformly samples `k` training rows as `R` without replacement.
pub fn select_reference_set(
    dataset: LabeledDataset,
    k: usize,
    seed: u64,
) -> Result<ReferenceSplit> {
    let train = dataset.indices(Split::Train);
    if k == 0 || k > train.len() {
        return Err(Error::invalid(format!(
            "reference size {k} outside 1..={}",
            train.len()
        )));
    }
    let mut order = train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut reference = order[..k].to_vec();
    reference.sort_unstable();
    let remainder = train
        .into_iter()
        .filter(|i| !reference.contains(i))
        .collect();
    ReferenceSplit::new(dataset, reference, remainder)
}

/// Paths and sizes for an IDX classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxManifest {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_holdout_size")]
    pub val_size: usize,
    #[serde(default = "default_holdout_size")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_size() -> usize {
    5000
}

fn default_holdout_size() -> usize {
    1000
}

impl IdxManifest {
    /// Resolves relative paths against `dir`.
    pub fn resolve(mut self, dir: &Path) -> Self {
        for p in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.test_images,
            &mut self.test_labels,
        ] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        self
    }

    /// Train/validation rows come from a seeded shuffle of the training
    /// files, test rows from the head of the test files.
    pub fn load(&self) -> Result<LabeledDataset> {
        let pool = load_idx(&self.train_images, &self.train_labels, Split::Train)?;
        let test = load_idx(&self.test_images, &self.test_labels, Split::Test)?;
        if self.train_size + self.val_size > pool.len() || self.test_size > test.len() {
            return Err(Error::invalid(format!(
                "requested {}+{} training/validation and {} test rows, files hold {} and {}",
                self.train_size,
                self.val_size,
                self.test_size,
                pool.len(),
                test.len()
            )));
        }
        if pool.input_dim() != test.input_dim() {
            return Err(Error::invalid("train and test images differ in size"));
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let picked = &order[..self.train_size + self.val_size];
        let d = pool.input_dim();
        let total = picked.len() + self.test_size;
        let mut data = Vec::with_capacity(total * d);
        let mut labels = Vec::with_capacity(total);
        let mut splits = Vec::with_capacity(total);
        let pool_labels = pool.targets.labels().unwrap();
        for (k, &i) in picked.iter().enumerate() {
            data.extend_from_slice(pool.inputs.row(i));
            labels.push(pool_labels[i]);
            splits.push(if k < self.train_size {
                Split::Train
            } else {
                Split::Val
            });
        }
        let test_labels = test.targets.labels().unwrap();
        for (i, &label) in test_labels.iter().enumerate().take(self.test_size) {
            data.extend_from_slice(test.inputs.row(i));
            labels.push(label);
            splits.push(Split::Test);
        }
        let num_classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
        LabeledDataset::new(
            Tensor::matrix(total, d, data),
            Targets::Classes {
                labels,
                num_classes,
            },
            splits,
        )
    }
}

/// Path helper used by manifests and configs.
pub fn ensure_exists(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}
