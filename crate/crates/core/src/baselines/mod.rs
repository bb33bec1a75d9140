//! Comparison models: a plain network, MC-dropout, a neural process and an
//! exact Gaussian process.

pub mod dropout;
pub mod gp;
pub mod np;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use dropout::DropoutNet;
pub use gp::{fit_hyperparameters, gp_regress, log_marginal_likelihood, GpFit, GpModel};
pub use np::NpModel;

use crate::datasets::PointSet;
use crate::error::{Error, Result};
use crate::inference::PredictiveSummary;
use crate::nn::ParamStore;
use crate::noise::NoiseBundle;
use crate::tensor::Tensor;
use crate::training::{
    adam_step, gradient_check, summary_metric, AdamConfig, AdamState, EpochRecord, TrainConfig,
    TrainReport,
};

/// A baseline trained by minibatch gradient ascent on an objective.
pub trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Objective for one minibatch (per-point mean, larger is better) and
    /// gradients of its negation.
    fn objective(&self, batch: &PointSet, noise: NoiseBundle) -> Result<(f64, Vec<Tensor>)>;
    /// Predictive distribution used for validation.
    fn validation_summary(
        &self,
        val: &PointSet,
        samples: usize,
        seed: u64,
    ) -> Result<PredictiveSummary>;
}

/// Shared minibatch loop with Adam and early stopping on a validation
/// set. Metric rows report the objective in `bound_total` and `bound_M`
/// (`bound_R` is zero).
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &PointSet,
    val: &PointSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if train.is_empty() {
        return Err(Error::invalid("no training points"));
    }
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(model.store().values());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_seed = cfg.seed ^ 0x5a17_da7e;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffler);
        let mut total = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for rows in &chunks {
            let batch = train.select(rows);
            let (value, grads) = model.objective(&batch, NoiseBundle::training(cfg.seed, step))?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "baseline objective".into(),
                    step: step as usize,
                });
            }
            gradient_check(&grads, model.store(), step as usize)?;
            adam_step(model.store_mut().values_mut(), &grads, &mut state, adam)?;
            total += value;
            step += 1;
        }
        let mean = total / chunks.len() as f64;
        let val_metric = if val.is_empty() {
            mean
        } else {
            let summary = model.validation_summary(val, cfg.val_samples.max(1), val_seed)?;
            summary_metric(&summary, &val.targets)
        };
        records.push(EpochRecord {
            epoch,
            bound_total: mean,
            bound_r: 0.0,
            bound_m: mean,
            val_metric,
        });
        if val.is_empty() {
            continue;
        }
        match &best {
            Some((score, at, _)) if val_metric <= *score => {
                if epoch - at >= cfg.patience {
                    break;
                }
            }
            _ => best = Some((val_metric, epoch, model.store().clone())),
        }
    }
    let best_epoch = best.map(|(_, epoch, params)| {
        model
            .store_mut()
            .load_from(&params)
            .expect("same architecture");
        epoch
    });
    Ok(TrainReport {
        records,
        best_epoch,
        steps: step,
    })
}
