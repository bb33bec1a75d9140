//! End-to-end runs: data preparation, training any model kind into a
//! checkpoint, evaluation reports and regression bands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::np::NpConfig;
use crate::baselines::{self, DropoutNet, GpFit, GpModel, NpModel};
use crate::checkpoint::{Checkpoint, Scaling, StoredData};
use crate::config::{ModelKind, OodSpec, RunConfig, TaskSpec};
use crate::datasets::{
    gen_ood_noise, gen_toy1, gen_toy2, load_idx, select_reference_set, LabeledDataset, PointSet,
    ReferenceSplit, Split, Targets,
};
use crate::error::{Error, Result};
use crate::inference::{
    aucr, bands_from_summary, classification_csv, posterior_predictive, uniform_grid, Band,
    PredictiveSummary,
};
use crate::model::{FnpModel, Likelihood, TaskKind};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::training::{self, metrics_csv, TrainConfig, TrainReport};

pub const CHECKPOINT_FILE: &str = "model.ckpt.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const BANDS_FILE: &str = "bands.csv";

const TEST_STREAM: u64 = 0x7e57_0000;
const OOD_STREAM: u64 = 0x00d0_0000;

/// Data for one run, in model units.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: ReferenceSplit,
    pub scaling: Option<Scaling>,
    pub task: TaskKind,
}

impl Prepared {
    pub fn reference(&self) -> PointSet {
        self.split.base.points(&self.split.reference)
    }

    /// `R ∪ M`.
    pub fn training(&self) -> PointSet {
        let mut rows = self.split.reference.clone();
        rows.extend(&self.split.remainder);
        rows.sort_unstable();
        self.split.base.points(&rows)
    }

    pub fn validation(&self) -> PointSet {
        self.split.base.points(&self.split.validation())
    }
}

fn standardize(data: LabeledDataset, scaling: &Scaling) -> Result<LabeledDataset> {
    let values = data
        .targets
        .values()
        .ok_or_else(|| Error::invalid("standardization needs regression targets"))?;
    let targets = Targets::Values(values.iter().map(|&y| scaling.target(y)).collect());
    LabeledDataset::new(scaling.inputs(&data.inputs), targets, data.splits)
}

fn toy_dataset(task: &TaskSpec, seed: u64) -> Option<LabeledDataset> {
    match task {
        TaskSpec::Toy1 => Some(gen_toy1(seed)),
        TaskSpec::Toy2 => Some(gen_toy2(seed)),
        TaskSpec::IdxClassification { .. } => None,
    }
}

/// Builds the dataset, standardizes regression data, selects `R` with
/// `seed`, and holds out validation points when the data has none.
pub fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared> {
    let (data, scaling) = match toy_dataset(&cfg.task, cfg.data_seed) {
        Some(raw) => {
            let scaling = Scaling::fit(&raw.inputs, raw.targets.values().expect("toy targets"));
            (standardize(raw, &scaling)?, Some(scaling))
        }
        None => {
            let manifest = cfg.manifest()?.expect("classification task has a manifest");
            (manifest.load()?, None)
        }
    };
    let task = data.task();
    let k = cfg.reference_size.unwrap_or(10);
    let mut split = select_reference_set(data, k, seed)?;
    if split.validation().is_empty() {
        split = split.hold_out_validation(cfg.train.val_fraction.unwrap_or(0.0), seed)?;
    }
    Ok(Prepared {
        split,
        scaling,
        task,
    })
}

/// Held-out test points in data units: a fresh draw of the toy generator,
/// or the test rows of an IDX task.
pub fn test_set(cfg: &RunConfig, prepared: &Prepared) -> PointSet {
    match toy_dataset(&cfg.task, cfg.data_seed ^ TEST_STREAM) {
        Some(fresh) => fresh.points(&(0..fresh.len()).collect::<Vec<_>>()),
        None => prepared.split.base.points(&prepared.split.test()),
    }
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        epochs: t.epochs.unwrap_or(100),
        batch_size: t.batch_size.unwrap_or(100),
        learning_rate: t.learning_rate.unwrap_or(1e-3),
        free_bits: t.free_bits.unwrap_or(1.0),
        free_bits_mode: t.free_bits_mode.unwrap_or_default(),
        patience: t.patience.unwrap_or(20),
        seed,
        ..TrainConfig::default()
    }
}

fn hidden(cfg: &RunConfig) -> Vec<usize> {
    let mut h = cfg.torso_hidden.clone().unwrap_or_default();
    h.extend(cfg.head_hidden.clone().unwrap_or_default());
    h
}

fn np_config(cfg: &RunConfig, input_dim: usize, task: TaskKind) -> NpConfig {
    NpConfig {
        input_dim,
        latent_dim: cfg.d_z.unwrap_or(32),
        task,
        torso_hidden: cfg.torso_hidden.clone().unwrap_or_default(),
        head_hidden: cfg.head_hidden.clone().unwrap_or_default(),
        max_context: cfg.reference_size.unwrap_or(10),
    }
}

fn dropout_rate(cfg: &RunConfig) -> f64 {
    match cfg.model {
        ModelKind::McDropout => cfg.train.dropout.unwrap_or(0.5),
        _ => 0.0,
    }
}

fn scalar_inputs(points: &PointSet) -> Result<(Vec<f64>, Vec<f64>)> {
    if points.inputs.cols() != 1 {
        return Err(Error::invalid("the GP baseline needs scalar inputs"));
    }
    let y = points
        .targets
        .values()
        .ok_or_else(|| Error::invalid("the GP baseline needs regression targets"))?;
    Ok((points.inputs.data().to_vec(), y.to_vec()))
}

fn gp_store(gp: &GpModel) -> ParamStore {
    let mut store = ParamStore::new();
    store
        .add("gp.log_lengthscale", Tensor::scalar(gp.log_lengthscale))
        .expect("fresh store");
    store
        .add("gp.log_noise_var", Tensor::scalar(gp.log_noise_var))
        .expect("fresh store");
    store
}

/// A trained model together with its checkpoint and metrics log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.report.records)
    }
}

/// Trains the configured model with `seed` (initialization, `R`, batches
/// and noise all derive from it).
pub fn train(cfg: &RunConfig, seed: u64) -> Result<TrainOutcome> {
    let prepared = prepare(cfg, seed)?;
    let input_dim = prepared.split.base.input_dim();
    let task = prepared.task;
    let tc = train_config(cfg, seed);
    let reference = prepared.reference();
    let mut effective = cfg.clone();
    effective.seed = seed;
    let (store, report, context) = match cfg.model {
        ModelKind::Fnp | ModelKind::FnpPlus => {
            let mc = cfg
                .model_config(input_dim, task)
                .ok_or_else(|| Error::invalid("incomplete FNP configuration"))?;
            let mut model = FnpModel::new(mc, seed)?;
            let report = training::train(&mut model, &prepared.split, &tc)?;
            (model.params().clone(), report, Some(reference))
        }
        ModelKind::Np => {
            let mut model = NpModel::new(np_config(cfg, input_dim, task), seed)?;
            model.set_context(reference.clone());
            let report = baselines::fit(
                &mut model,
                &prepared.training(),
                &prepared.validation(),
                &tc,
            )?;
            (model.params().clone(), report, Some(reference))
        }
        ModelKind::Nn | ModelKind::McDropout => {
            let mut model =
                DropoutNet::new(input_dim, &hidden(cfg), task, dropout_rate(cfg), seed)?;
            let report = baselines::fit(
                &mut model,
                &prepared.training(),
                &prepared.validation(),
                &tc,
            )?;
            (model.params().clone(), report, None)
        }
        ModelKind::Gp => {
            let all = prepared.training();
            let (x, y) = scalar_inputs(&all)?;
            let gp = baselines::fit_hyperparameters(&x, &y, cfg.train.restarts.unwrap_or(5), seed)?;
            let report = TrainReport {
                records: Vec::new(),
                best_epoch: None,
                steps: 0,
            };
            (gp_store(&gp), report, Some(all))
        }
    };
    let mut checkpoint = Checkpoint::from_store(&store, effective, seed, input_dim, task);
    checkpoint.context = context.map(|c| StoredData::new(&c.inputs, &c.targets));
    checkpoint.scaling = prepared.scaling;
    Ok(TrainOutcome { checkpoint, report })
}

/// A model restored from a checkpoint, ready for prediction.
#[derive(Clone, Debug)]
pub enum Trained {
    Fnp(FnpModel),
    Np(NpModel),
    Dropout(DropoutNet),
    Gp(GpFit),
}

/// Rebuilt model plus everything needed to predict in data units.
#[derive(Clone, Debug)]
pub struct Restored {
    pub model: Trained,
    pub context: Option<PointSet>,
    pub scaling: Option<Scaling>,
    pub task: TaskKind,
}

fn restore_store(ckpt: &Checkpoint, store: &mut ParamStore) -> Result<()> {
    ckpt.restore_into(store)?;
    Ok(())
}

pub fn restore(ckpt: &Checkpoint) -> Result<Restored> {
    let cfg = &ckpt.config;
    let context = match &ckpt.context {
        Some(c) => {
            let inputs = c.inputs()?;
            let n = inputs.rows() as u64;
            Some(PointSet::new(inputs, c.targets()?, (0..n).collect())?)
        }
        None => None,
    };
    let need_context = || {
        context.clone().ok_or_else(|| {
            Error::invalid("checkpoint lacks the conditioning data this model needs")
        })
    };
    let model = match cfg.model {
        ModelKind::Fnp | ModelKind::FnpPlus => {
            let mc = cfg
                .model_config(ckpt.input_dim, ckpt.task)
                .ok_or_else(|| Error::invalid("incomplete FNP configuration"))?;
            let mut m = FnpModel::new(mc, ckpt.seed)?;
            restore_store(ckpt, m.params_mut())?;
            need_context()?;
            Trained::Fnp(m)
        }
        ModelKind::Np => {
            let mut m = NpModel::new(np_config(cfg, ckpt.input_dim, ckpt.task), ckpt.seed)?;
            restore_store(ckpt, m.params_mut())?;
            need_context()?;
            Trained::Np(m)
        }
        ModelKind::Nn | ModelKind::McDropout => {
            let mut m = DropoutNet::new(
                ckpt.input_dim,
                &hidden(cfg),
                ckpt.task,
                dropout_rate(cfg),
                ckpt.seed,
            )?;
            restore_store(ckpt, m.params_mut())?;
            Trained::Dropout(m)
        }
        ModelKind::Gp => {
            let mut store = gp_store(&GpModel {
                log_lengthscale: 0.0,
                log_noise_var: 0.0,
            });
            restore_store(ckpt, &mut store)?;
            let read = |name: &str| store.get(store.id(name).expect("gp parameter")).item();
            let gp = GpModel {
                log_lengthscale: read("gp.log_lengthscale"),
                log_noise_var: read("gp.log_noise_var"),
            };
            let (x, y) = scalar_inputs(&need_context()?)?;
            Trained::Gp(GpFit::new(gp, &x, &y)?)
        }
    };
    Ok(Restored {
        model,
        context,
        scaling: ckpt.scaling.clone(),
        task: ckpt.task,
    })
}

impl Restored {
    /// Predictive distribution at raw (data-unit) inputs, reported in data
    /// units.
    pub fn predict(
        &self,
        inputs: &Tensor,
        ids: &[u64],
        samples: usize,
        seed: u64,
    ) -> Result<PredictiveSummary> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "queries have {} features, the model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        let x = match &self.scaling {
            Some(s) => s.inputs(inputs),
            None => inputs.clone(),
        };
        let summary = match &self.model {
            Trained::Fnp(m) => posterior_predictive(
                m,
                self.context.as_ref().expect("checked on restore"),
                &x,
                ids,
                samples,
                seed,
            )?,
            Trained::Np(m) => m.predict(
                self.context.as_ref().expect("checked on restore"),
                &x,
                samples,
                seed,
            )?,
            Trained::Dropout(m) => m.predict(&x, ids, samples, seed)?,
            Trained::Gp(fit) => {
                let noise = fit.model.noise_var();
                let draw = fit
                    .predict(x.data())
                    .into_iter()
                    .map(|(mean, var)| Likelihood::Gaussian {
                        mean,
                        std: (var + noise).sqrt(),
                    })
                    .collect();
                PredictiveSummary::from_draws(vec![draw])?
            }
        };
        match &self.scaling {
            None => Ok(summary),
            Some(s) => {
                let draws = summary
                    .draws
                    .into_iter()
                    .map(|d| {
                        d.into_iter()
                            .map(|l| match l {
                                Likelihood::Gaussian { mean, std } => {
                                    let (mean, std) = s.restore(mean, std);
                                    Likelihood::Gaussian { mean, std }
                                }
                                other => other,
                            })
                            .collect()
                    })
                    .collect();
                PredictiveSummary::from_draws(draws)
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.model {
            Trained::Fnp(m) => m.config().input_dim,
            Trained::Np(m) => m.config().input_dim,
            Trained::Dropout(m) => m.params().values()[0].rows(),
            Trained::Gp(_) => 1,
        }
    }
}

/// Uncertainty on one out-of-distribution set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub name: String,
    pub points: usize,
    pub mean_entropy: f64,
    pub aucr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: ModelKind,
    pub seed: u64,
    pub samples: usize,
    pub test_points: usize,
    /// Misclassification rate (classification).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_error: Option<f64>,
    /// Root mean squared error of the predictive mean (regression).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_rmse: Option<f64>,
    /// Mean predictive log density of the test targets (regression).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_log_density: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mean_entropy: Option<f64>,
    pub ood: Vec<OodResult>,
}

/// Report plus the per-point classification CSV.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Option<String>,
}

fn ood_inputs(spec: &OodSpec, dim: usize, seed: u64) -> Result<Tensor> {
    match spec {
        OodSpec::Idx { images, labels } => Ok(load_idx(images, labels, Split::Test)?.inputs),
        OodSpec::Gaussian { count } | OodSpec::Uniform { count } => {
            gen_ood_noise(spec.noise_kind().expect("noise spec"), dim, *count, seed)
        }
    }
}

/// Test metrics and o.o.d. audits for a checkpoint. `cfg` supplies the
/// evaluation settings (samples, o.o.d. sets); the data come from the
/// checkpoint's own configuration.
pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, seed: u64) -> Result<Evaluation> {
    let restored = restore(ckpt)?;
    let prepared = prepare(&ckpt.config, ckpt.seed)?;
    let test = test_set(&ckpt.config, &prepared);
    let samples = cfg.eval.samples.unwrap_or(100);
    let summary = restored.predict(&test.inputs, &test.ids, samples, seed)?;
    let mut report = EvalReport {
        model: ckpt.config.model,
        seed,
        samples,
        test_points: test.len(),
        test_error: None,
        test_rmse: None,
        test_log_density: None,
        test_mean_entropy: None,
        ood: Vec::new(),
    };
    let mut predictions = None;
    match &test.targets {
        Targets::Values(ys) => {
            if !cfg.eval.ood.is_empty() {
                return Err(Error::invalid("o.o.d. audits need a classification task"));
            }
            let n = ys.len() as f64;
            let (mut sq, mut ld) = (0.0, 0.0);
            for (i, &y) in ys.iter().enumerate() {
                let (mean, _) = summary.gaussian(i).expect("regression summary");
                sq += (mean - y).powi(2);
                ld += summary.log_density(i, y).expect("regression summary");
            }
            report.test_rmse = Some((sq / n).sqrt());
            report.test_log_density = Some(ld / n);
        }
        Targets::Classes { labels, .. } => {
            let predicted = summary.predicted_classes().expect("classification summary");
            let wrong = predicted.iter().zip(labels).filter(|(p, y)| p != y).count();
            report.test_error = Some(wrong as f64 / labels.len() as f64);
            let inside = summary.entropies()?;
            report.test_mean_entropy = Some(mean(&inside));
            predictions = Some(classification_csv(&test.ids, &summary)?);
            for (k, spec) in cfg.eval.ood.iter().enumerate() {
                let x = ood_inputs(spec, ckpt.input_dim, seed ^ (OOD_STREAM + k as u64))?;
                let ids: Vec<u64> = (0..x.rows() as u64)
                    .map(|i| (k as u64 + 1) << 40 | i)
                    .collect();
                let outside = restored.predict(&x, &ids, samples, seed)?.entropies()?;
                report.ood.push(OodResult {
                    name: spec.name(),
                    points: outside.len(),
                    mean_entropy: mean(&outside),
                    aucr: aucr(&inside, &outside)?,
                });
            }
        }
    }
    Ok(Evaluation {
        report,
        predictions,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Predictive bands over the configured grid (regression only).
pub fn bands(cfg: &RunConfig, ckpt: &Checkpoint, seed: u64) -> Result<Vec<Band>> {
    if !ckpt.config.task.is_regression() {
        return Err(Error::invalid("bands need a regression task"));
    }
    let restored = restore(ckpt)?;
    let (lo, hi) = match (cfg.bands.lo, cfg.bands.hi) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => ckpt.config.task.band_range().expect("regression range"),
    };
    let grid = uniform_grid(lo, hi, cfg.bands.points.unwrap_or(200));
    let ids: Vec<u64> = (0..grid.len() as u64).collect();
    let summary = restored.predict(
        &Tensor::column(grid.clone()),
        &ids,
        cfg.eval.samples.unwrap_or(100),
        seed,
    )?;
    bands_from_summary(&grid, &summary)
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_output(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config(model: &str, epochs: usize) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{"task": {{"kind": "toy1"}}, "model": "{model}", "train": {{"epochs": {epochs}}},
                "eval": {{"samples": 8}}, "bands": {{"points": 11}}}}"#
        ))
        .unwrap()
    }

    #[test]
    fn prepared_toy_data_is_standardized() {
        let p = prepare(&toy_config("fnp", 1), 0).unwrap();
        let x = p.split.base.inputs.data();
        assert!(x.iter().sum::<f64>().abs() < 1e-9);
        assert_eq!(p.split.reference.len(), 10);
        assert!(p.validation().is_empty());
    }

    #[test]
    fn every_model_kind_round_trips() {
        for model in ["fnp", "fnp-plus", "np", "nn", "mc-dropout", "gp"] {
            let cfg = toy_config(model, 2);
            let out = train(&cfg, 1).unwrap();
            let text = out.checkpoint.to_json();
            let back = Checkpoint::from_json(&text, Path::new("mem")).unwrap();
            let a = evaluate(&cfg, &out.checkpoint, 3).unwrap();
            let b = evaluate(&cfg, &back, 3).unwrap();
            assert_eq!(a.report, b.report, "{model}");
            assert!(a.report.test_rmse.unwrap().is_finite());
            let bands = bands(&cfg, &back, 3).unwrap();
            assert_eq!(bands.len(), 11);
            assert!(bands.iter().all(|b| b.std > 0.0), "{model}");
        }
    }
}
