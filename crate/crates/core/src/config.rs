//! JSON run configuration with per-task defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{IdxManifest, NoiseKind};
use crate::model::{ModelConfig, TaskKind, Variant};
use crate::training::FreeBitsMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config field `{field}`: {message}")]
    Field {
        field: &'static str,
        message: String,
    },
    #[error("config field `{field}`: path {path} does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
}

fn field(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field,
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum TaskSpec {
    Toy1,
    Toy2,
    IdxClassification { manifest: PathBuf },
}

impl TaskSpec {
    pub fn is_regression(&self) -> bool {
        matches!(self, TaskSpec::Toy1 | TaskSpec::Toy2)
    }

    /// Plotted input range of a toy task.
    pub fn band_range(&self) -> Option<(f64, f64)> {
        match self {
            TaskSpec::Toy1 => Some((-0.2, 1.2)),
            TaskSpec::Toy2 => Some((-6.0, 6.0)),
            TaskSpec::IdxClassification { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Fnp,
    FnpPlus,
    Np,
    Nn,
    McDropout,
    Gp,
}

impl ModelKind {
    pub fn variant(self) -> Option<Variant> {
        match self {
            ModelKind::Fnp => Some(Variant::Fnp),
            ModelKind::FnpPlus => Some(Variant::FnpPlus),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    /// Nats per latent unit.
    pub free_bits: Option<f64>,
    pub free_bits_mode: Option<FreeBitsMode>,
    pub patience: Option<usize>,
    /// Fraction of `M` held out for early stopping.
    pub val_fraction: Option<f64>,
    pub dropout: Option<f64>,
    /// Random restarts for the GP hyperparameter search.
    pub restarts: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum OodSpec {
    Gaussian {
        #[serde(default = "default_ood_count")]
        count: usize,
    },
    Uniform {
        #[serde(default = "default_ood_count")]
        count: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

fn default_ood_count() -> usize {
    1000
}

impl OodSpec {
    pub fn name(&self) -> String {
        match self {
            OodSpec::Gaussian { .. } => "gaussian".into(),
            OodSpec::Uniform { .. } => "uniform".into(),
            OodSpec::Idx { images, .. } => images.display().to_string(),
        }
    }

    pub fn noise_kind(&self) -> Option<NoiseKind> {
        match self {
            OodSpec::Gaussian { .. } => Some(NoiseKind::Gaussian),
            OodSpec::Uniform { .. } => Some(NoiseKind::Uniform),
            OodSpec::Idx { .. } => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: Option<usize>,
    pub ood: Vec<OodSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BandsSection {
    pub points: Option<usize>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

/// Everything a `train`, `eval` or `bands` command needs. Unset optional
/// fields take task-dependent defaults in [`RunConfig::fill_defaults`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelKind,
    #[serde(default)]
    pub seed: u64,
    /// Seed for toy data generation and reference selection.
    #[serde(default)]
    pub data_seed: u64,
    pub d_u: Option<usize>,
    pub d_z: Option<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub torso_hidden: Option<Vec<usize>>,
    pub head_hidden: Option<Vec<usize>>,
    pub reference_size: Option<usize>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bands: BandsSection,
    pub out_dir: Option<PathBuf>,
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_temperature() -> f64 {
    0.3
}

impl RunConfig {
    /// Parses, resolves relative paths against the file's directory, fills
    /// defaults and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(dir);
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Parses and fills defaults without touching the filesystem.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        cfg.fill_defaults();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fill_defaults(&mut self) {
        let toy = self.task.is_regression();
        let (d_u, d_z) = match self.task {
            TaskSpec::Toy1 => (3, 50),
            TaskSpec::Toy2 => (3, 10),
            TaskSpec::IdxClassification { .. } => (32, 64),
        };
        self.d_u.get_or_insert(d_u);
        self.d_z.get_or_insert(match (self.model, &self.task) {
            (ModelKind::Np, TaskSpec::IdxClassification { .. }) => 32,
            _ => d_z,
        });
        self.torso_hidden
            .get_or_insert_with(|| if toy { vec![100] } else { vec![256, 256] });
        self.head_hidden.get_or_insert_with(|| match self.model {
            ModelKind::Fnp | ModelKind::FnpPlus if toy => vec![100],
            _ => vec![],
        });
        self.reference_size
            .get_or_insert(if toy { 10 } else { 100 });
        let t = &mut self.train;
        t.epochs.get_or_insert(if toy { 3000 } else { 100 });
        t.batch_size.get_or_insert(100);
        t.learning_rate.get_or_insert(1e-3);
        t.free_bits.get_or_insert(match self.model {
            ModelKind::FnpPlus if toy => 4.0,
            _ => 1.0,
        });
        t.free_bits_mode.get_or_insert_default();
        t.patience.get_or_insert(20);
        t.val_fraction.get_or_insert(if toy { 0.0 } else { 0.1 });
        t.dropout.get_or_insert(0.5);
        t.restarts.get_or_insert(5);
        self.eval.samples.get_or_insert(100);
        self.bands.points.get_or_insert(200);
        if let Some((lo, hi)) = self.task.band_range() {
            self.bands.lo.get_or_insert(lo);
            self.bands.hi.get_or_insert(hi);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |name: &'static str, v: Option<usize>| match v {
            Some(0) => Err(field(name, "must be at least 1")),
            _ => Ok(()),
        };
        positive("d_u", self.d_u)?;
        positive("d_z", self.d_z)?;
        positive("reference_size", self.reference_size)?;
        positive("train.batch_size", self.train.batch_size)?;
        positive("eval.samples", self.eval.samples)?;
        positive("bands.points", self.bands.points)?;
        positive("train.restarts", self.train.restarts)?;
        if !(self.epsilon > 0.0) {
            return Err(field("epsilon", "must be positive"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(field("temperature", "must be positive and finite"));
        }
        for (name, widths) in [
            ("torso_hidden", &self.torso_hidden),
            ("head_hidden", &self.head_hidden),
        ] {
            if widths.as_ref().is_some_and(|w| w.contains(&0)) {
                return Err(field(name, "hidden widths must be positive"));
            }
        }
        if self.train.learning_rate.is_some_and(|lr| !(lr > 0.0)) {
            return Err(field("train.learning_rate", "must be positive"));
        }
        if self.train.free_bits.is_some_and(|fb| !(fb >= 0.0)) {
            return Err(field("train.free_bits", "must be non-negative"));
        }
        if self
            .train
            .val_fraction
            .is_some_and(|f| !(0.0..1.0).contains(&f))
        {
            return Err(field("train.val_fraction", "must lie in [0, 1)"));
        }
        if self.train.dropout.is_some_and(|p| !(0.0..1.0).contains(&p)) {
            return Err(field("train.dropout", "must lie in [0, 1)"));
        }
        if self.model == ModelKind::Gp && !self.task.is_regression() {
            return Err(field(
                "model",
                "the GP baseline only supports regression tasks",
            ));
        }
        if let (Some(lo), Some(hi)) = (self.bands.lo, self.bands.hi) {
            if !(lo < hi) {
                return Err(field("bands", "lo must be below hi"));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let TaskSpec::IdxClassification { manifest } = &mut self.task {
            fix(manifest);
        }
        if let Some(out) = &mut self.out_dir {
            fix(out);
        }
        for spec in &mut self.eval.ood {
            if let OodSpec::Idx { images, labels } = spec {
                fix(images);
                fix(labels);
            }
        }
    }

    fn check_paths(&self) -> Result<(), ConfigError> {
        let exists = |name: &'static str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::MissingPath {
                    field: name,
                    path: p.to_path_buf(),
                })
            }
        };
        if let TaskSpec::IdxClassification { manifest } = &self.task {
            exists("task.manifest", manifest)?;
        }
        for spec in &self.eval.ood {
            if let OodSpec::Idx { images, labels } = spec {
                exists("eval.ood.images", images)?;
                exists("eval.ood.labels", labels)?;
            }
        }
        Ok(())
    }

    /// Reads the IDX manifest of a classification task.
    pub fn manifest(&self) -> Result<Option<IdxManifest>, ConfigError> {
        let TaskSpec::IdxClassification { manifest } = &self.task else {
            return Ok(None);
        };
        let text = std::fs::read_to_string(manifest).map_err(|source| ConfigError::Read {
            path: manifest.clone(),
            source,
        })?;
        let m: IdxManifest = serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: manifest.clone(),
            message: e.to_string(),
        })?;
        let m = m.resolve(manifest.parent().unwrap_or(Path::new(".")));
        for (name, p) in [
            ("manifest.train_images", &m.train_images),
            ("manifest.train_labels", &m.train_labels),
            ("manifest.test_images", &m.test_images),
            ("manifest.test_labels", &m.test_labels),
        ] {
            if !p.exists() {
                return Err(ConfigError::MissingPath {
                    field: name,
                    path: p.clone(),
                });
            }
        }
        Ok(Some(m))
    }

    /// Model configuration for FNP-family runs.
    pub fn model_config(&self, input_dim: usize, task: TaskKind) -> Option<ModelConfig> {
        Some(ModelConfig {
            input_dim,
            d_u: self.d_u?,
            d_z: self.d_z?,
            variant: self.model.variant()?,
            task,
            epsilon: self.epsilon,
            temperature: self.temperature,
            torso_hidden: self.torso_hidden.clone()?,
            head_hidden: self.head_hidden.clone()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults() {
        let cfg = RunConfig::from_json(r#"{"task": {"kind": "toy1"}, "model": "fnp"}"#).unwrap();
        assert_eq!((cfg.d_u, cfg.d_z), (Some(3), Some(50)));
        assert_eq!(cfg.reference_size, Some(10));
        assert_eq!(cfg.train.free_bits, Some(1.0));
        assert_eq!(cfg.eval.samples, Some(100));
        assert_eq!(cfg.temperature, 0.3);
        let plus =
            RunConfig::from_json(r#"{"task": {"kind": "toy2"}, "model": "fnp-plus"}"#).unwrap();
        assert_eq!((plus.d_u, plus.d_z), (Some(3), Some(10)));
        assert_eq!(plus.train.free_bits, Some(4.0));
        assert_eq!((plus.bands.lo, plus.bands.hi), (Some(-6.0), Some(6.0)));
    }

    #[test]
    fn field_errors_name_the_field() {
        let err = RunConfig::from_json(r#"{"task": {"kind": "toy1"}, "model": "fnp", "d_z": 0}"#)
            .unwrap_err();
        assert!(err.to_string().contains("d_z"), "{err}");
        let err = RunConfig::from_json(r#"{"task": {"kind": "toy1"}, "model": "fnp", "bogus": 1}"#)
            .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::from_json(
            r#"{"task": {"kind": "toy1"}, "model": "fnp", "train": {"val_fraction": 1.5}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("val_fraction"), "{err}");
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"task": {"kind": "idx-classification", "manifest": "nope.json"}, "model": "fnp-plus"}"#,
        )
        .unwrap();
        assert!(matches!(
            RunConfig::load(&path),
            Err(ConfigError::MissingPath { .. })
        ));
    }
}
