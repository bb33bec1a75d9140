//! JSON checkpoints: named parameters as flat arrays, the run configuration,
//! the seed, and the conditioning data a model needs at prediction time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::datasets::Targets;
use crate::model::TaskKind;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unsupported checkpoint version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint lacks parameter {0}")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParameter(String),
    #[error("parameter {name} is stored twice")]
    Duplicate { name: String },
    #[error("parameter {name}: shape {shape:?} inconsistent with {found} (expected {expected})")]
    Inconsistent {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("parameter {name}: checkpoint shape {stored:?}, model shape {model:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        model: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "values")]
pub enum StoredTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Labeled points a model conditions on (the reference set, or the whole
/// training set for the GP).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredData {
    pub rows: usize,
    pub cols: usize,
    pub inputs: Vec<f64>,
    pub targets: StoredTargets,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl StoredData {
    pub fn new(inputs: &Tensor, targets: &Targets) -> Self {
        let (targets, num_classes) = match targets {
            Targets::Classes {
                labels,
                num_classes,
            } => (StoredTargets::Classes(labels.clone()), Some(*num_classes)),
            Targets::Values(v) => (StoredTargets::Values(v.clone()), None),
        };
        StoredData {
            rows: inputs.rows(),
            cols: inputs.cols(),
            inputs: inputs.data().to_vec(),
            targets,
            num_classes,
        }
    }

    pub fn inputs(&self) -> Result<Tensor, CheckpointError> {
        Tensor::new(vec![self.rows, self.cols], self.inputs.clone()).map_err(|_| {
            CheckpointError::Inconsistent {
                name: "context.inputs".into(),
                shape: vec![self.rows, self.cols],
                expected: self.rows * self.cols,
                found: self.inputs.len(),
            }
        })
    }

    pub fn targets(&self) -> Result<Targets, CheckpointError> {
        let (t, n) = match &self.targets {
            StoredTargets::Classes(labels) => (
                Targets::Classes {
                    labels: labels.clone(),
                    num_classes: self.num_classes.unwrap_or(0),
                },
                labels.len(),
            ),
            StoredTargets::Values(v) => (Targets::Values(v.clone()), v.len()),
        };
        if n != self.rows {
            return Err(CheckpointError::Inconsistent {
                name: "context.targets".into(),
                shape: vec![self.rows],
                expected: self.rows,
                found: n,
            });
        }
        Ok(t)
    }
}

/// Affine standardization of regression inputs and targets; models see
/// `(x − x_mean)/x_std` and `(y − y_mean)/y_std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scaling {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Scaling {
    /// Column means and population standard deviations (a zero spread maps
    /// to 1).
    pub fn fit(inputs: &Tensor, targets: &[f64]) -> Self {
        let moments = |v: &mut dyn Iterator<Item = f64>| {
            let v: Vec<f64> = v.collect();
            let n = v.len().max(1) as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        };
        let (x_mean, x_std) = (0..inputs.cols())
            .map(|j| moments(&mut (0..inputs.rows()).map(|i| inputs.row(i)[j])))
            .unzip();
        let (y_mean, y_std) = moments(&mut targets.iter().copied());
        Scaling {
            x_mean,
            x_std,
            y_mean,
            y_std,
        }
    }

    pub fn inputs(&self, x: &Tensor) -> Tensor {
        let cols = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| (v - self.x_mean[k % cols]) / self.x_std[k % cols])
            .collect();
        Tensor::matrix(x.rows(), cols, data)
    }

    pub fn target(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    /// Maps a model-space mean and standard deviation back to data units.
    pub fn restore(&self, mean: f64, std: f64) -> (f64, f64) {
        (mean * self.y_std + self.y_mean, std * self.y_std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub input_dim: usize,
    pub task: TaskKind,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<StoredData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<Scaling>,
}

impl Checkpoint {
    pub fn from_store(
        store: &ParamStore,
        config: RunConfig,
        seed: u64,
        input_dim: usize,
        task: TaskKind,
    ) -> Self {
        let params = store
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            seed,
            config,
            input_dim,
            task,
            params,
            context: None,
            scaling: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self, CheckpointError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let parse = |e: serde_json::Error| CheckpointError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let header: Header = serde_json::from_str(text).map_err(parse)?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: header.version,
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(parse)?;
        ckpt.check()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    /// Unique names and values that fill their shapes.
    pub fn check(&self) -> Result<(), CheckpointError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(CheckpointError::Duplicate {
                    name: p.name.clone(),
                });
            }
            let expected: usize = p.shape.iter().product();
            if expected != p.values.len() {
                return Err(CheckpointError::Inconsistent {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    expected,
                    found: p.values.len(),
                });
            }
        }
        if let Some(c) = &self.context {
            c.inputs()?;
            c.targets()?;
        }
        Ok(())
    }

    /// Overwrites every parameter of `store` with the stored value of the
    /// same name; names and shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for entry in &self.params {
            if store.id(&entry.name).is_none() {
                return Err(CheckpointError::UnexpectedParameter(entry.name.clone()));
            }
        }
        for name in names {
            let entry = self
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
            let id = store.id(&name).expect("listed name");
            let target = store.get_mut(id);
            if target.shape() != entry.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    stored: entry.shape.clone(),
                    model: target.shape().to_vec(),
                });
            }
            target.data_mut().copy_from_slice(&entry.values);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore, Checkpoint) {
        let mut store = ParamStore::new();
        store
            .add(
                "w",
                Tensor::matrix(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, 2.5e17]),
            )
            .unwrap();
        store
            .add("b", Tensor::matrix(1, 2, vec![f64::MIN_POSITIVE, -0.0]))
            .unwrap();
        let cfg = RunConfig::from_json(r#"{"task": {"kind": "toy1"}, "model": "fnp"}"#).unwrap();
        let data = StoredData::new(
            &Tensor::column(vec![0.25, 0.5]),
            &Targets::Values(vec![1.0, std::f64::consts::PI]),
        );
        let mut ckpt = Checkpoint::from_store(&store, cfg, 7, 1, TaskKind::Regression);
        ckpt.context = Some(data);
        ckpt.scaling = Some(Scaling::fit(&Tensor::column(vec![0.25, 0.5]), &[1.0, 3.0]));
        (store, ckpt)
    }

    #[test]
    fn round_trip_is_exact() {
        let (store, ckpt) = sample();
        let text = ckpt.to_json();
        let back = Checkpoint::from_json(&text, Path::new("mem")).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_json(), text);
        let mut restored = store.clone();
        for v in restored.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        back.restore_into(&mut restored).unwrap();
        for ((_, a), (_, b)) in restored.iter().zip(store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn scaling_round_trip() {
        let x = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let s = Scaling::fit(&x, &[2.0, 4.0, 6.0]);
        assert_eq!(s.x_std[1], 1.0);
        let z = s.inputs(&x);
        assert!((z.row(0)[0] + z.row(2)[0]).abs() < 1e-15);
        let (m, sd) = s.restore(s.target(4.5), 0.5);
        assert!((m - 4.5).abs() < 1e-12);
        assert!((sd - 0.5 * s.y_std).abs() < 1e-15);
    }

    #[test]
    fn version_is_checked() {
        let (_, mut ckpt) = sample();
        ckpt.version = 99;
        let err = Checkpoint::from_json(&ckpt.to_json(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, CheckpointError::Version { found: 99 }));
    }

    #[test]
    fn tampered_shape_is_inconsistent() {
        let (_, mut ckpt) = sample();
        ckpt.params[0].shape = vec![3, 2];
        let err = Checkpoint::from_json(&ckpt.to_json(), Path::new("mem")).unwrap_err();
        assert!(matches!(err, CheckpointError::Inconsistent { .. }));
    }

    #[test]
    fn missing_and_reshaped_parameters() {
        let (mut store, mut ckpt) = sample();
        ckpt.params.pop();
        assert!(matches!(
            ckpt.restore_into(&mut store),
            Err(CheckpointError::MissingParameter(name)) if name == "b"
        ));
        let (mut store, mut ckpt) = sample();
        ckpt.params[0].shape = vec![4, 1];
        assert!(matches!(
            ckpt.restore_into(&mut store),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
