//! Exact Gaussian process regression with an RBF kernel on scalar inputs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const FIRST_JITTER: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-2;

/// Unit-variance RBF kernel `exp(−(x − x')²/(2ℓ²))` plus observation noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpModel {
    pub log_lengthscale: f64,
    pub log_noise_var: f64,
}

impl GpModel {
    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    fn kernel(&self, a: f64, b: f64) -> f64 {
        let l = self.lengthscale();
        (-(a - b) * (a - b) / (2.0 * l * l)).exp()
    }

    fn gram(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let noise = self.noise_var();
        DMatrix::from_fn(n, n, |i, j| {
            self.kernel(x[i], x[j]) + if i == j { noise } else { 0.0 }
        })
    }
}

/// Factorizes `k`, retrying with diagonal jitter 1e-8, 1e-7, … up to 1e-2.
fn robust_cholesky(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    let mut jitter = FIRST_JITTER;
    while jitter <= MAX_JITTER * (1.0 + 1e-9) {
        let mut shifted = k.clone();
        for i in 0..k.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Cholesky { jitter: MAX_JITTER })
}

/// A GP conditioned on training data.
#[derive(Clone, Debug)]
pub struct GpFit {
    pub model: GpModel,
    x: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    /// Jitter that had to be added for the factorization.
    pub jitter: f64,
}

impl GpFit {
    pub fn new(model: GpModel, x: &[f64], y: &[f64]) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(format!(
                "GP needs matching non-empty inputs and targets ({} vs {})",
                x.len(),
                y.len()
            )));
        }
        let (chol, jitter) = robust_cholesky(&model.gram(x))?;
        let alpha = chol.solve(&DVector::from_column_slice(y));
        Ok(GpFit {
            model,
            x: x.to_vec(),
            chol,
            alpha,
            jitter,
        })
    }

    /// Posterior mean and latent-function variance at each query.
    pub fn predict(&self, queries: &[f64]) -> Vec<(f64, f64)> {
        queries
            .iter()
            .map(|&q| {
                let ks = DVector::from_iterator(
                    self.x.len(),
                    self.x.iter().map(|&x| self.model.kernel(x, q)),
                );
                let mean = ks.dot(&self.alpha);
                let v = self
                    .chol
                    .l()
                    .solve_lower_triangular(&ks)
                    .expect("non-singular factor");
                (mean, (1.0 - v.norm_squared()).max(0.0))
            })
            .collect()
    }
}

/// Posterior mean and latent variance of a GP with fixed hyperparameters.
pub fn gp_regress(x: &[f64], y: &[f64], queries: &[f64], gp: &GpModel) -> Result<Vec<(f64, f64)>> {
    Ok(GpFit::new(*gp, x, y)?.predict(queries))
}

/// Log marginal likelihood and its gradient with respect to
/// `(log ℓ, log σ_n²)`.
pub fn log_marginal_likelihood(x: &[f64], y: &[f64], gp: &GpModel) -> Result<(f64, [f64; 2])> {
    let fit = GpFit::new(*gp, x, y)?;
    let n = x.len();
    let yv = DVector::from_column_slice(y);
    let l = fit.chol.l();
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let value = -0.5 * yv.dot(&fit.alpha) - log_det - 0.5 * n as f64 * LN_2PI;
    let k_inv = fit.chol.inverse();
    let w = &fit.alpha * fit.alpha.transpose() - k_inv;
    let l2 = gp.lengthscale().powi(2);
    let (mut d_len, mut d_noise) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let d2 = (x[i] - x[j]).powi(2);
            d_len += w[(i, j)] * gp.kernel(x[i], x[j]) * d2 / l2;
        }
        d_noise += w[(i, i)] * gp.noise_var();
    }
    Ok((value, [0.5 * d_len, 0.5 * d_noise]))
}

/// Multi-start gradient ascent (Adam) on the log marginal likelihood.
pub fn fit_hyperparameters(x: &[f64], y: &[f64], restarts: usize, seed: u64) -> Result<GpModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = {
        let (lo, hi) = x
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        (hi - lo).max(1e-3)
    };
    let mut best: Option<(f64, GpModel)> = None;
    for r in 0..restarts.max(1) {
        let mut theta = if r == 0 {
            [(0.2 * spread).ln(), (0.1f64).ln()]
        } else {
            [
                (spread * rng.random_range(0.02..1.0f64)).ln(),
                rng.random_range(-8.0..0.0),
            ]
        };
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        let (lr, b1, b2) = (0.05, 0.9, 0.999);
        for t in 1..=400 {
            let gp = GpModel {
                log_lengthscale: theta[0],
                log_noise_var: theta[1],
            };
            let Ok((_, grad)) = log_marginal_likelihood(x, y, &gp) else {
                break;
            };
            for k in 0..2 {
                m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
                v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
                let mh = m[k] / (1.0 - b1.powi(t));
                let vh = v[k] / (1.0 - b2.powi(t));
                theta[k] += lr * mh / (vh.sqrt() + 1e-8);
            }
            theta[1] = theta[1].clamp(-16.0, 4.0);
            theta[0] = theta[0].clamp((1e-3 * spread).ln(), (100.0 * spread).ln());
        }
        let gp = GpModel {
            log_lengthscale: theta[0],
            log_noise_var: theta[1],
        };
        if let Ok((lml, _)) = log_marginal_likelihood(x, y, &gp) {
            if lml.is_finite() && best.as_ref().is_none_or(|(b, _)| lml > *b) {
                best = Some((lml, gp));
            }
        }
    }
    best.map(|(_, gp)| gp)
        .ok_or_else(|| Error::invalid("GP hyperparameter search failed from every start"))
}
