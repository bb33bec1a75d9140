//! Neural process with a mean-aggregated context encoding and one global
//! Gaussian latent.

use std::cmp::Ordering;

use rayon::prelude::*;

use super::Trainable;
use crate::datasets::{PointSet, Targets};
use crate::distributions::{gaussian_kl_rows, gaussian_rsample, GaussianVars};
use crate::error::{Error, Result};
use crate::inference::{eval_pool, PredictiveSummary};
use crate::model::{likelihoods, log_likelihood_rows, TaskKind};
use crate::nn::{Bound, Init, Linear, Mlp, ParamStore};
use crate::noise::{NoiseBundle, Role};
use crate::tensor::{Tape, Tensor, Var};

/// Width of each point's context encoding.
pub const ENCODING_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct NpConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub task: TaskKind,
    pub torso_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    /// Largest context drawn during training.
    pub max_context: usize,
}

#[derive(Clone, Debug)]
pub struct NpModel {
    config: NpConfig,
    params: ParamStore,
    torso: Option<Mlp>,
    encoder: Linear,
    latent_mean: Linear,
    latent_logvar: Linear,
    decoder: Mlp,
    context: Option<PointSet>,
}

/// Canonical multiset view of a context: unique `(x, y)` rows in sorted
/// order with weights `count / n`.
fn canonical_context(context: &PointSet) -> (PointSet, Vec<f64>) {
    let n = context.len();
    let key = |i: usize| -> (Vec<f64>, f64) {
        let y = match &context.targets {
            Targets::Classes { labels, .. } => labels[i] as f64,
            Targets::Values(v) => v[i],
        };
        (context.inputs.row(i).to_vec(), y)
    };
    let cmp = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| -> Ordering {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
            .then(a.1.total_cmp(&b.1))
    };
    let mut rows: Vec<usize> = (0..n).collect();
    rows.sort_by(|&a, &b| cmp(&key(a), &key(b)));
    let mut unique: Vec<usize> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for &i in &rows {
        match unique.last() {
            Some(&j) if cmp(&key(i), &key(j)).is_eq() => *counts.last_mut().unwrap() += 1,
            _ => {
                unique.push(i);
                counts.push(1);
            }
        }
    }
    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    (context.select(&unique), weights)
}

impl NpModel {
    pub fn new(config: NpConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.latent_dim == 0 {
            return Err(Error::invalid(
                "input and latent dimensions must be positive",
            ));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let torso = if config.torso_hidden.is_empty() {
            None
        } else {
            let mut sizes = vec![config.input_dim];
            sizes.extend_from_slice(&config.torso_hidden);
            Some(Mlp::new(&mut params, &mut init, "torso", &sizes, true)?)
        };
        let h = config
            .torso_hidden
            .last()
            .copied()
            .unwrap_or(config.input_dim);
        let encoder = Linear::new(
            &mut params,
            &mut init,
            "encoder",
            h + config.task.label_width(),
            ENCODING_DIM,
        )?;
        let latent_mean = Linear::new(
            &mut params,
            &mut init,
            "latent.mean",
            ENCODING_DIM,
            config.latent_dim,
        )?;
        let latent_logvar = Linear::new(
            &mut params,
            &mut init,
            "latent.logvar",
            ENCODING_DIM,
            config.latent_dim,
        )?;
        let mut sizes = vec![h + config.latent_dim];
        sizes.extend_from_slice(&config.head_hidden);
        sizes.push(config.task.head_width());
        let decoder = Mlp::new(&mut params, &mut init, "decoder", &sizes, false)?;
        Ok(NpModel {
            config,
            params,
            torso,
            encoder,
            latent_mean,
            latent_logvar,
            decoder,
            context: None,
        })
    }

    /// Context used for validation during training.
    pub fn set_context(&mut self, context: PointSet) {
        self.context = Some(context);
    }

    pub fn config(&self) -> &NpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn features(&self, tape: &mut Tape, bound: &Bound, x: &Tensor) -> Result<Var> {
        let xv = tape.constant(x.clone());
        match &self.torso {
            Some(t) => t.forward(tape, bound, xv),
            None => Ok(xv),
        }
    }

    fn aggregate(&self, tape: &mut Tape, bound: &Bound, context: &PointSet) -> Result<Var> {
        if context.is_empty() {
            return Err(Error::invalid("the context set is empty"));
        }
        let (unique, weights) = canonical_context(context);
        let h = self.features(tape, bound, &unique.inputs)?;
        let y = tape.constant(unique.targets.encode(self.config.task)?);
        let hy = tape.concat(h, y)?;
        let pre = self.encoder.forward(tape, bound, hy)?;
        let r = tape.relu(pre)?;
        let w = tape.constant(Tensor::row_vector(weights));
        tape.matmul(w, r)
    }

    fn latent(&self, tape: &mut Tape, bound: &Bound, context: &PointSet) -> Result<GaussianVars> {
        let r = self.aggregate(tape, bound, context)?;
        let mean = self.latent_mean.forward(tape, bound, r)?;
        let logvar = self.latent_logvar.forward(tape, bound, r)?;
        GaussianVars::new(tape, mean, logvar)
    }

    /// Mean context encoding `r`; exposed for inspection.
    pub fn encoding(&self, context: &PointSet) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let r = self.aggregate(&mut tape, &bound, context)?;
        Ok(tape.value(r).data().to_vec())
    }

    fn decode(&self, tape: &mut Tape, bound: &Bound, x: &Tensor, theta: Var) -> Result<Var> {
        let h = self.features(tape, bound, x)?;
        let zeros = tape.constant(Tensor::zeros(&[x.rows(), self.config.latent_dim]));
        let rep = tape.add_row(zeros, theta)?;
        let act = tape.relu(rep)?;
        let input = tape.concat(h, act)?;
        self.decoder.forward(tape, bound, input)
    }

    /// `samples` draws of the global latent from `p(θ | context)`, each
    /// decoded at every query.
    pub fn predict(
        &self,
        context: &PointSet,
        queries: &Tensor,
        samples: usize,
        seed: u64,
    ) -> Result<PredictiveSummary> {
        if samples == 0 {
            return Err(Error::invalid("need at least one predictive sample"));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let prior = self.latent(&mut tape, &bound, context)?;
        let prior = prior.row(&tape, 0);
        let draws = eval_pool().install(|| {
            (0..samples as u64)
                .into_par_iter()
                .map(|s| {
                    let eps = NoiseBundle::predictive(seed, s).normals(
                        0,
                        Role::Global,
                        self.config.latent_dim,
                    );
                    let theta: Vec<f64> = prior
                        .mean()
                        .iter()
                        .zip(prior.logvar())
                        .zip(eps)
                        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
                        .collect();
                    let mut tape = Tape::new();
                    let bound = self.params.bind(&mut tape, false);
                    let tv = tape.constant(Tensor::row_vector(theta));
                    let out = self.decode(&mut tape, &bound, queries, tv)?;
                    Ok(likelihoods(self.config.task, tape.value(out)))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        PredictiveSummary::from_draws(draws)
    }

    /// Context size for one training batch, uniform in `[3, max_context]`
    /// and capped by the batch.
    fn context_size(&self, batch_len: usize, noise: NoiseBundle) -> usize {
        let hi = self.config.max_context.min(batch_len);
        let lo = 3.min(hi);
        let u = noise.uniforms(1, Role::Global, 1)[0];
        (lo + ((hi - lo + 1) as f64 * u) as usize).min(hi)
    }
}

impl Trainable for NpModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `(Σ_targets log p(y | x, θ) − KL(q(θ|batch) ‖ p(θ|context))) / |batch|`
    /// with `θ ~ q` and the context a prefix of the (shuffled) batch.
    fn objective(&self, batch: &PointSet, noise: NoiseBundle) -> Result<(f64, Vec<Tensor>)> {
        let c = self.context_size(batch.len(), noise);
        let context = batch.select(&(0..c).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let q = self.latent(&mut tape, &bound, batch)?;
        let p = self.latent(&mut tape, &bound, &context)?;
        let eps = noise.normals(0, Role::Global, self.config.latent_dim);
        let theta = gaussian_rsample(&mut tape, q, Tensor::row_vector(eps))?;
        let out = self.decode(&mut tape, &bound, &batch.inputs, theta)?;
        let ll = log_likelihood_rows(&mut tape, self.config.task, out, &batch.targets)?;
        let ll = tape.sum(ll)?;
        let kl = gaussian_kl_rows(&mut tape, q, p)?;
        let kl = tape.sum(kl)?;
        let diff = tape.sub(ll, kl)?;
        let objective = tape.scale(diff, 1.0 / batch.len() as f64)?;
        let loss = tape.neg(objective)?;
        let value = tape.value(objective).item();
        let mut grads = tape.backward(loss)?;
        Ok((value, bound.gradients(&mut grads, &self.params)))
    }

    fn validation_summary(
        &self,
        val: &PointSet,
        samples: usize,
        seed: u64,
    ) -> Result<PredictiveSummary> {
        let context = self
            .context
            .as_ref()
            .ok_or_else(|| Error::invalid("neural process validation needs a context"))?;
        self.predict(context, &val.inputs, samples, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> NpModel {
        NpModel::new(
            NpConfig {
                input_dim: 2,
                latent_dim: 4,
                task: TaskKind::Regression,
                torso_hidden: vec![8],
                head_hidden: vec![],
                max_context: 5,
            },
            3,
        )
        .unwrap()
    }

    fn points(rows: &[[f64; 3]]) -> PointSet {
        let inputs = Tensor::matrix(
            rows.len(),
            2,
            rows.iter().flat_map(|r| [r[0], r[1]]).collect(),
        );
        let targets = Targets::Values(rows.iter().map(|r| r[2]).collect());
        PointSet::new(inputs, targets, (0..rows.len() as u64).collect()).unwrap()
    }

    #[test]
    fn encoding_is_a_multiset_mean() {
        let np = model();
        let a = [0.3, -0.2, 1.0];
        let b = [1.1, 0.4, -0.5];
        let c = [-0.7, 0.9, 0.2];
        let base = np.encoding(&points(&[a, b, c])).unwrap();
        assert_eq!(base, np.encoding(&points(&[c, a, b])).unwrap());
        assert_eq!(base, np.encoding(&points(&[a, b, c, c, b, a])).unwrap());
        assert_ne!(base, np.encoding(&points(&[a, b, c, c])).unwrap());
    }

    #[test]
    fn single_point_context_is_its_projection() {
        let np = model();
        let a = points(&[[0.3, -0.2, 1.0]]);
        let mut tape = Tape::new();
        let bound = np.params.bind(&mut tape, false);
        let h = np.features(&mut tape, &bound, &a.inputs).unwrap();
        let y = tape.constant(a.targets.encode(TaskKind::Regression).unwrap());
        let hy = tape.concat(h, y).unwrap();
        let pre = np.encoder.forward(&mut tape, &bound, hy).unwrap();
        let r = tape.relu(pre).unwrap();
        assert_eq!(tape.value(r).data(), np.encoding(&a).unwrap().as_slice());
    }

    #[test]
    fn context_sizes_stay_in_range() {
        let np = model();
        for step in 0..200 {
            let c = np.context_size(10, NoiseBundle::training(0, step));
            assert!((3..=5).contains(&c));
        }
        assert_eq!(np.context_size(2, NoiseBundle::training(0, 0)), 2);
    }

    #[test]
    fn objective_has_gradients() {
        let np = model();
        let batch = points(&[
            [0.1, 0.2, 0.3],
            [0.4, 0.5, 0.6],
            [0.7, 0.8, 0.9],
            [1.0, 1.1, 1.2],
        ]);
        let (v, g) = np.objective(&batch, NoiseBundle::training(1, 0)).unwrap();
        assert!(v.is_finite());
        assert!(g.iter().any(|t| t.data().iter().any(|&x| x != 0.0)));
    }
}
