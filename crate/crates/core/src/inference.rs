//! Posterior predictive sampling, predictive entropy, AUCR, and regression
//! band summaries.

use std::fmt::Write as _;
use std::sync::OnceLock;

use rayon::prelude::*;

use crate::datasets::PointSet;
use crate::distributions::{bernoulli_sample, DiagGaussianParams};
use crate::error::{Error, Result};
use crate::model::{kernel_g, prior_z_params, FnpModel, Likelihood, Variant};
use crate::noise::{NoiseBundle, Role};
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_SAMPLES: usize = 100;

/// Query points draw noise from a key space disjoint from dataset points.
const QUERY_KEY: u64 = 1 << 63;

/// Thread pool for evaluation, capped by `FNPROC_THREADS` when set.
pub fn eval_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("FNPROC_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("evaluation thread pool")
    })
}

/// Per-point summary over all draws.
#[derive(Clone, Debug, PartialEq)]
pub enum Aggregate {
    Classes(Vec<f64>),
    Gaussian { mean: f64, std: f64 },
}

/// `S` draws of per-point likelihood parameters and their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSummary {
    pub draws: Vec<Vec<Likelihood>>,
    pub aggregate: Vec<Aggregate>,
}

impl PredictiveSummary {
    /// Averages class probabilities, or forms the Gaussian mixture moments.
    pub fn from_draws(draws: Vec<Vec<Likelihood>>) -> Result<Self> {
        let Some(first) = draws.first() else {
            return Err(Error::invalid(
                "a predictive summary needs at least one draw",
            ));
        };
        let n = first.len();
        if draws.iter().any(|d| d.len() != n) {
            return Err(Error::invalid("draws disagree on the number of points"));
        }
        let s = draws.len() as f64;
        let aggregate = (0..n)
            .map(|i| match &first[i] {
                Likelihood::Categorical(p0) => {
                    let mut acc = vec![0.0; p0.len()];
                    for d in &draws {
                        let Likelihood::Categorical(p) = &d[i] else {
                            return Err(Error::invalid("mixed likelihood kinds"));
                        };
                        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                    }
                    acc.iter_mut().for_each(|a| *a /= s);
                    Ok(Aggregate::Classes(acc))
                }
                Likelihood::Gaussian { .. } => {
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for d in &draws {
                        let Likelihood::Gaussian { mean, std } = d[i] else {
                            return Err(Error::invalid("mixed likelihood kinds"));
                        };
                        m1 += mean;
                        m2 += std * std + mean * mean;
                    }
                    let (mean, second) = (m1 / s, m2 / s);
                    Ok(Aggregate::Gaussian {
                        mean,
                        std: (second - mean * mean).max(0.0).sqrt(),
                    })
                }
            })
            .collect::<Result<_>>()?;
        Ok(PredictiveSummary { draws, aggregate })
    }

    pub fn samples(&self) -> usize {
        self.draws.len()
    }

    pub fn len(&self) -> usize {
        self.aggregate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregate.is_empty()
    }

    pub fn probabilities(&self, i: usize) -> Option<&[f64]> {
        match &self.aggregate[i] {
            Aggregate::Classes(p) => Some(p),
            Aggregate::Gaussian { .. } => None,
        }
    }

    /// Mixture mean and standard deviation of a regression point.
    pub fn gaussian(&self, i: usize) -> Option<(f64, f64)> {
        match self.aggregate[i] {
            Aggregate::Gaussian { mean, std } => Some((mean, std)),
            Aggregate::Classes(_) => None,
        }
    }

    /// Predictive entropy of every point (classification only).
    pub fn entropies(&self) -> Result<Vec<f64>> {
        (0..self.len())
            .map(|i| {
                let p = self
                    .probabilities(i)
                    .ok_or_else(|| Error::invalid("entropy needs class probabilities"))?;
                predictive_entropy(p)
            })
            .collect()
    }

    /// Arg-max class of every point (classification only).
    pub fn predicted_classes(&self) -> Option<Vec<usize>> {
        (0..self.len())
            .map(|i| self.probabilities(i).map(argmax))
            .collect()
    }

    /// `ln (1/S) Σ_s N(y; m_s, σ_s²)` for a regression point.
    pub fn log_density(&self, i: usize, y: f64) -> Option<f64> {
        let logs: Vec<f64> = self
            .draws
            .iter()
            .map(|d| match d[i] {
                Likelihood::Gaussian { mean, std } => Some(
                    -crate::distributions::HALF_LN_2PI
                        - std.ln()
                        - 0.5 * ((y - mean) / std).powi(2),
                ),
                Likelihood::Categorical(_) => None,
            })
            .collect::<Option<_>>()?;
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        Some(max + (sum / logs.len() as f64).ln())
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn sample_row(mean: &[f64], logvar: &[f64], noise: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Frozen reference-set quantities shared by every draw.
struct Conditioning {
    ids: Vec<u64>,
    u: Vec<DiagGaussianParams>,
    mu_theta: Vec<Vec<f64>>,
    nu_theta: Vec<Vec<f64>>,
}

fn conditioning(model: &FnpModel, reference: &PointSet) -> Result<Conditioning> {
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape, false);
    let x = tape.constant(reference.inputs.clone());
    let e = model.embed_vars(&mut tape, &params, x)?;
    let (mu, nu) = model.reference_codes(&mut tape, &params, e.z, &reference.targets)?;
    Ok(Conditioning {
        ids: reference.ids.clone(),
        u: (0..reference.len()).map(|i| e.u.row(&tape, i)).collect(),
        mu_theta: rows_of(tape.value(mu)),
        nu_theta: rows_of(tape.value(nu)),
    })
}

/// One posterior predictive draw for every query point: sample `u` for `R`
/// and the queries, hard parents `a*`, then `z*` from the parent-averaged
/// prior, and read the likelihood off the head.
fn predictive_draw(
    model: &FnpModel,
    cond: &Conditioning,
    queries: &[DiagGaussianParams],
    query_ids: &[u64],
    noise: NoiseBundle,
) -> Result<Vec<Likelihood>> {
    let cfg = model.config();
    let kernel = model.kernel();
    let nr = cond.ids.len();
    let u_r: Vec<Vec<f64>> = cond
        .ids
        .iter()
        .zip(&cond.u)
        .map(|(&id, p)| sample_row(p.mean(), p.logvar(), &noise.normals(id, Role::U, cfg.d_u)))
        .collect();
    let nq = queries.len();
    let mut z_data = Vec::with_capacity(nq * cfg.d_z);
    let mut u_data = Vec::with_capacity(nq * cfg.d_u);
    for (p, &id) in queries.iter().zip(query_ids) {
        let key = QUERY_KEY | id;
        let u = sample_row(p.mean(), p.logvar(), &noise.normals(key, Role::U, cfg.d_u));
        let uniforms = noise.uniforms(key, Role::ARow, nr);
        let parents: Vec<f64> = u_r
            .iter()
            .zip(&uniforms)
            .map(|(ur, &v)| f64::from(u8::from(bernoulli_sample(kernel_g(&u, ur, kernel), v))))
            .collect();
        let prior = prior_z_params(&parents, &cond.mu_theta, &cond.nu_theta, cfg.epsilon)?;
        let z = sample_row(
            prior.mean(),
            prior.logvar(),
            &noise.normals(key, Role::Z, cfg.d_z),
        );
        z_data.extend(z);
        u_data.extend(u);
    }
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape, false);
    let z = tape.constant(Tensor::matrix(nq, cfg.d_z, z_data));
    let u = (cfg.variant == Variant::FnpPlus)
        .then(|| tape.constant(Tensor::matrix(nq, cfg.d_u, u_data)));
    let head = model.predict_head(&mut tape, &params, z, u)?;
    Ok(model.likelihoods(tape.value(head)))
}

/// `S` posterior predictive draws for the rows of `queries`. The result for
/// a query depends only on the reference set, its own input and identity,
/// `S`, and `seed`.
pub fn posterior_predictive(
    model: &FnpModel,
    reference: &PointSet,
    queries: &Tensor,
    query_ids: &[u64],
    samples: usize,
    seed: u64,
) -> Result<PredictiveSummary> {
    if reference.is_empty() {
        return Err(Error::invalid("the reference set is empty"));
    }
    if samples == 0 {
        return Err(Error::invalid("need at least one predictive sample"));
    }
    if queries.shape().len() != 2 || queries.rows() != query_ids.len() {
        return Err(Error::invalid("one identity per query row is required"));
    }
    if queries.rows() == 0 {
        return PredictiveSummary::from_draws(vec![Vec::new(); samples]);
    }
    let cond = conditioning(model, &reference.sorted())?;
    let q_params: Vec<DiagGaussianParams> =
        model.embed(queries)?.into_iter().map(|(u, _)| u).collect();
    let draws = eval_pool().install(|| {
        (0..samples as u64)
            .into_par_iter()
            .map(|s| {
                predictive_draw(
                    model,
                    &cond,
                    &q_params,
                    query_ids,
                    NoiseBundle::predictive(seed, s),
                )
            })
            .collect::<Result<Vec<_>>>()
    })?;
    PredictiveSummary::from_draws(draws)
}

/// `−Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "not a probability vector (sum {total})"
        )));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Fraction of (in, out) pairs where the out-of-distribution entropy is
/// larger, ties counting one half.
pub fn aucr(inside: &[f64], outside: &[f64]) -> Result<f64> {
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::invalid("AUCR needs both sets non-empty"));
    }
    let mut sorted = inside.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut score = 0.0;
    for &o in outside {
        let below = sorted.partition_point(|&v| v < o);
        let not_above = sorted.partition_point(|&v| v <= o);
        score += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Ok(score / (inside.len() as f64 * outside.len() as f64))
}

/// One row of a regression band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

impl Band {
    pub fn lo(&self) -> f64 {
        self.mean - 3.0 * self.std
    }

    pub fn hi(&self) -> f64 {
        self.mean + 3.0 * self.std
    }
}

/// Pairs grid inputs with mixture moments of a regression summary.
pub fn bands_from_summary(grid: &[f64], summary: &PredictiveSummary) -> Result<Vec<Band>> {
    if grid.len() != summary.len() {
        return Err(Error::invalid("grid and summary lengths differ"));
    }
    grid.iter()
        .zip(&summary.aggregate)
        .map(|(&x, a)| match *a {
            Aggregate::Gaussian { mean, std } => Ok(Band { x, mean, std }),
            Aggregate::Classes(_) => Err(Error::invalid("bands need a regression model")),
        })
        .collect()
}

/// Predictive mean and standard deviation over a one-dimensional grid.
pub fn regression_bands(
    model: &FnpModel,
    reference: &PointSet,
    grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<Band>> {
    let ids: Vec<u64> = (0..grid.len() as u64).collect();
    let summary = posterior_predictive(
        model,
        reference,
        &Tensor::column(grid.to_vec()),
        &ids,
        samples,
        seed,
    )?;
    bands_from_summary(grid, &summary)
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

pub fn bands_csv(bands: &[Band]) -> String {
    let mut out = String::from("x,mean,lo,hi\n");
    for b in bands {
        writeln!(out, "{},{},{},{}", b.x, b.mean, b.lo(), b.hi()).unwrap();
    }
    out
}

pub fn classification_csv(ids: &[u64], summary: &PredictiveSummary) -> Result<String> {
    let entropies = summary.entropies()?;
    let mut out = String::from("point_id,entropy,max_prob,pred_class\n");
    for (i, (&id, h)) in ids.iter().zip(entropies).enumerate() {
        let p = summary.probabilities(i).expect("classification summary");
        let c = argmax(p);
        writeln!(out, "{id},{h},{},{c}", p[c]).unwrap();
    }
    Ok(out)
}
