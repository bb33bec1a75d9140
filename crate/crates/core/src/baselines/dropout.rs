//! Feed-forward network with inverted dropout on every hidden layer. With
//! rate 0 it is the plain deterministic network.

use rayon::prelude::*;

use super::Trainable;
use crate::datasets::PointSet;
use crate::error::{Error, Result};
use crate::inference::{eval_pool, PredictiveSummary};
use crate::model::{likelihoods, log_likelihood_rows, TaskKind};
use crate::nn::{Init, Mlp, ParamStore};
use crate::noise::{NoiseBundle, Role};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug)]
pub struct DropoutNet {
    params: ParamStore,
    mlp: Mlp,
    hidden: Vec<usize>,
    task: TaskKind,
    rate: f64,
}

impl DropoutNet {
    /// `hidden` lists the hidden widths between input and output.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        task: TaskKind,
        rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(task.head_width());
        let mlp = Mlp::new(&mut params, &mut init, "net", &sizes, false)?;
        Ok(DropoutNet {
            params,
            mlp,
            hidden: hidden.to_vec(),
            task,
            rate,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Inverted-dropout masks for every hidden layer, one stream per point.
    fn masks(&self, ids: &[u64], noise: NoiseBundle) -> Vec<Tensor> {
        let keep = 1.0 - self.rate;
        let width: usize = self.hidden.iter().sum();
        let per_point: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                noise
                    .uniforms(id, Role::Dropout, width)
                    .into_iter()
                    .map(|u| if u < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            })
            .collect();
        let mut offset = 0;
        self.hidden
            .iter()
            .map(|&w| {
                let data = per_point
                    .iter()
                    .flat_map(|m| m[offset..offset + w].iter().copied())
                    .collect();
                offset += w;
                Tensor::matrix(ids.len(), w, data)
            })
            .collect()
    }

    /// Head output; `noise` of `None` runs without dropout.
    fn head(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        ids: &[u64],
        noise: Option<NoiseBundle>,
    ) -> Result<(crate::nn::Bound, crate::tensor::Var)> {
        let bound = self.params.bind(tape, true);
        let xv = tape.constant(x.clone());
        let masks = match noise {
            Some(n) if self.rate > 0.0 => Some(self.masks(ids, n)),
            _ => None,
        };
        let out = self
            .mlp
            .forward_with(tape, &bound, xv, |tape, i, h| match &masks {
                Some(m) => {
                    let mv = tape.constant(m[i].clone());
                    tape.mul(h, mv)
                }
                None => Ok(h),
            })?;
        Ok((bound, out))
    }

    /// One forward pass without dropout.
    pub fn predict_deterministic(&self, x: &Tensor) -> Result<PredictiveSummary> {
        let mut tape = Tape::new();
        let (_, out) = self.head(&mut tape, x, &vec![0; x.rows()], None)?;
        PredictiveSummary::from_draws(vec![likelihoods(self.task, tape.value(out))])
    }

    /// `samples` stochastic passes with dropout kept on.
    pub fn predict_mc(
        &self,
        x: &Tensor,
        ids: &[u64],
        samples: usize,
        seed: u64,
    ) -> Result<PredictiveSummary> {
        if samples == 0 {
            return Err(Error::invalid("need at least one predictive sample"));
        }
        if x.rows() != ids.len() {
            return Err(Error::invalid("one identity per query row is required"));
        }
        let draws = eval_pool().install(|| {
            (0..samples as u64)
                .into_par_iter()
                .map(|s| {
                    let mut tape = Tape::new();
                    let (_, out) =
                        self.head(&mut tape, x, ids, Some(NoiseBundle::predictive(seed, s)))?;
                    Ok(likelihoods(self.task, tape.value(out)))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        PredictiveSummary::from_draws(draws)
    }

    /// MC-dropout when the rate is positive, otherwise a single pass.
    pub fn predict(
        &self,
        x: &Tensor,
        ids: &[u64],
        samples: usize,
        seed: u64,
    ) -> Result<PredictiveSummary> {
        if self.rate > 0.0 {
            self.predict_mc(x, ids, samples, seed)
        } else {
            self.predict_deterministic(x)
        }
    }
}

impl Trainable for DropoutNet {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn objective(&self, batch: &PointSet, noise: NoiseBundle) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (bound, out) = self.head(&mut tape, &batch.inputs, &batch.ids, Some(noise))?;
        let ll = log_likelihood_rows(&mut tape, self.task, out, &batch.targets)?;
        let mean = tape.mean(ll)?;
        let loss = tape.neg(mean)?;
        let value = tape.value(mean).item();
        let mut grads = tape.backward(loss)?;
        Ok((value, bound.gradients(&mut grads, &self.params)))
    }

    fn validation_summary(
        &self,
        val: &PointSet,
        samples: usize,
        seed: u64,
    ) -> Result<PredictiveSummary> {
        self.predict(&val.inputs, &val.ids, samples, seed)
    }
}
