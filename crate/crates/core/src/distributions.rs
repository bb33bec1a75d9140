//! Diagonal Gaussians, Bernoulli and binary concrete draws, and the
//! standard-normal log-CDF.
//!
//! Samplers never touch an RNG: callers pass the standard-normal or uniform
//! noise explicitly, so a draw can be replayed exactly. Each Gaussian routine
//! exists twice, once on plain slices and once on the tape (one row per point).

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Log-variances are clamped into this range everywhere.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// `ln(2π)/2`.
pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Fully factorized Gaussian given by its mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussianParams {
    mean: Vec<f64>,
    logvar: Vec<f64>,
}

impl DiagGaussianParams {
    /// Fails on a length mismatch or a NaN log-variance; finite values are
    /// clamped into `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                lhs: vec![mean.len()],
                rhs: vec![logvar.len()],
            });
        }
        if logvar.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("log-variance is NaN"));
        }
        let logvar = logvar
            .into_iter()
            .map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(DiagGaussianParams { mean, logvar })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussianParams {
            mean: vec![0.0; dim],
            logvar: vec![0.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn logvar(&self) -> &[f64] {
        &self.logvar
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `mean + exp(logvar/2) ⊙ noise`.
pub fn gaussian_sample(p: &DiagGaussianParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != p.dim() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_rsample",
            lhs: vec![p.dim()],
            rhs: vec![noise.len()],
        });
    }
    Ok(p.mean
        .iter()
        .zip(&p.logvar)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

pub fn gaussian_log_prob(x: &[f64], p: &DiagGaussianParams) -> f64 {
    debug_assert_eq!(x.len(), p.dim());
    x.iter()
        .zip(&p.mean)
        .zip(&p.logvar)
        .map(|((x, m), lv)| -HALF_LN_2PI - 0.5 * lv - 0.5 * (x - m) * (x - m) * (-lv).exp())
        .sum()
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn gaussian_kl(q: &DiagGaussianParams, p: &DiagGaussianParams) -> f64 {
    debug_assert_eq!(q.dim(), p.dim());
    (0..q.dim())
        .map(|k| {
            let (mq, lq, mp, lp) = (q.mean[k], q.logvar[k], p.mean[k], p.logvar[k]);
            0.5 * (lp - lq + (lq.exp() + (mq - mp) * (mq - mp)) * (-lp).exp() - 1.0)
        })
        .sum()
}

/// Temperature of the binary concrete relaxation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConcreteConfig {
    temperature: f64,
}

impl ConcreteConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "concrete temperature must be positive, got {temperature}"
            )));
        }
        Ok(ConcreteConfig { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl Default for ConcreteConfig {
    fn default() -> Self {
        ConcreteConfig { temperature: 0.3 }
    }
}

/// Logistic noise `ln u − ln(1−u)`; rejects `u` outside the open unit interval.
pub fn logistic_noise(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::invalid(format!("uniform noise {u} outside (0, 1)")));
    }
    Ok(u.ln() - (-u).ln_1p())
}

pub fn binary_concrete_sample(logit: f64, cfg: ConcreteConfig, u: f64) -> Result<f64> {
    Ok(crate::tensor::sigmoid(
        (logit + logistic_noise(u)?) / cfg.temperature,
    ))
}

pub fn bernoulli_sample(prob: f64, u: f64) -> bool {
    u < prob
}

/// `ln Φ(x)` for the standard normal CDF. Uses the asymptotic tail series
/// below `x = −37`, where `Φ` itself underflows long before its log does.
pub fn std_normal_log_cdf(x: f64) -> f64 {
    if x < -37.0 {
        let x2 = x * x;
        let inv = 1.0 / x2;
        // 1 − 1/x² + 3/x⁴ − 15/x⁶ + 105/x⁸
        let series = 1.0 - inv * (1.0 - 3.0 * inv * (1.0 - 5.0 * inv * (1.0 - 7.0 * inv)));
        -0.5 * x2 - HALF_LN_2PI - (-x).ln() + series.ln()
    } else if x <= 0.0 {
        (0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)).ln()
    } else {
        (-0.5 * statrs::function::erf::erfc(x / std::f64::consts::SQRT_2)).ln_1p()
    }
}

/// Row-per-point Gaussian parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub logvar: Var,
}

impl GaussianVars {
    /// Clamps `logvar` into the allowed range before wrapping.
    pub fn new(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Self> {
        if tape.value(mean).shape() != tape.value(logvar).shape() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_vars",
                lhs: tape.value(mean).shape().to_vec(),
                rhs: tape.value(logvar).shape().to_vec(),
            });
        }
        let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(GaussianVars { mean, logvar })
    }

    /// Pulls row `i` off the tape.
    pub fn row(&self, tape: &Tape, i: usize) -> DiagGaussianParams {
        DiagGaussianParams {
            mean: tape.value(self.mean).row(i).to_vec(),
            logvar: tape.value(self.logvar).row(i).to_vec(),
        }
    }
}

/// Reparametrized draw, differentiable in mean and log-variance.
pub fn gaussian_rsample(tape: &mut Tape, p: GaussianVars, noise: Tensor) -> Result<Var> {
    if noise.shape() != tape.value(p.mean).shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_rsample",
            lhs: tape.value(p.mean).shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let noise = tape.constant(noise);
    let half = tape.scale(p.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let scaled = tape.mul(std, noise)?;
    tape.add(p.mean, scaled)
}

/// Per-row log density, `n×d → n×1`.
pub fn gaussian_log_prob_rows(tape: &mut Tape, x: Var, p: GaussianVars) -> Result<Var> {
    let diff = tape.sub(x, p.mean)?;
    let sq = tape.square(diff)?;
    let neg_lv = tape.neg(p.logvar)?;
    let prec = tape.exp(neg_lv)?;
    let quad = tape.mul(sq, prec)?;
    let inner = tape.add(quad, p.logvar)?;
    let scaled = tape.scale(inner, -0.5)?;
    let per_dim = tape.add_scalar(scaled, -HALF_LN_2PI)?;
    tape.sum_rows(per_dim)
}

/// Per-row `KL(q ‖ p)`, `n×d → n×1`.
pub fn gaussian_kl_rows(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let var_q = tape.exp(q.logvar)?;
    let diff = tape.sub(q.mean, p.mean)?;
    let sq = tape.square(diff)?;
    let num = tape.add(var_q, sq)?;
    let neg_lp = tape.neg(p.logvar)?;
    let prec_p = tape.exp(neg_lp)?;
    let ratio = tape.mul(num, prec_p)?;
    let lv_diff = tape.sub(p.logvar, q.logvar)?;
    let inner = tape.add(lv_diff, ratio)?;
    let shifted = tape.add_scalar(inner, -1.0)?;
    let per_dim = tape.scale(shifted, 0.5)?;
    tape.sum_rows(per_dim)
}

/// Elementwise binary concrete draw `σ((logit + L)/λ)` with logistic noise
/// `L` derived from the uniform matrix `u`.
pub fn binary_concrete_rsample(
    tape: &mut Tape,
    logit: Var,
    cfg: ConcreteConfig,
    u: &Tensor,
) -> Result<Var> {
    if u.shape() != tape.value(logit).shape() {
        return Err(Error::ShapeMismatch {
            op: "binary_concrete_rsample",
            lhs: tape.value(logit).shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    let noise = u
        .data()
        .iter()
        .map(|&u| logistic_noise(u))
        .collect::<Result<Vec<_>>>()?;
    let noise = tape.constant(Tensor::new(u.shape().to_vec(), noise)?);
    let shifted = tape.add(logit, noise)?;
    let tempered = tape.scale(shifted, 1.0 / cfg.temperature)?;
    tape.sigmoid(tempered)
}
