//! The variational bound, its minibatch estimator, free bits, Adam, and the
//! training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{PointSet, ReferenceSplit, Targets};
use crate::distributions::{gaussian_kl_rows, gaussian_rsample};
use crate::error::{Error, Result};
use crate::inference::{argmax, posterior_predictive, PredictiveSummary};
use crate::model::{prior_z_vars, sample_bipartite_a, sample_dag_g, FnpModel, GraphMode, Variant};
use crate::nn::{Bound, ParamStore};
use crate::noise::{NoiseBundle, Role};
use crate::tensor::{Tape, Tensor, Var};

/// Value of the bound on one `{R, M̂}` batch. `l_m` is already rescaled by
/// `|M|/|M̂|`; `objective` is the free-bits version that training maximizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundEstimate {
    pub l_r: f64,
    pub l_m: f64,
    pub total: f64,
    pub recon_r: f64,
    pub kl_r: f64,
    pub recon_m: f64,
    pub kl_m: f64,
    pub objective: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundSettings {
    pub mode: GraphMode,
    /// Free nats per latent unit (`0` disables the floor).
    pub free_bits: f64,
    /// When set, the KL terms enter the objective scaled by this weight
    /// instead of through the free-bits floor.
    pub kl_weight: Option<f64>,
}

impl Default for BoundSettings {
    fn default() -> Self {
        BoundSettings {
            mode: GraphMode::Relaxed,
            free_bits: 0.0,
            kl_weight: None,
        }
    }
}

/// How the free-bits target shapes the KL terms during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreeBitsMode {
    /// `max(kl, λ·units)` per group.
    Clamp,
    /// KL weight in `[1e-3, 1]`, multiplied by 1.1 after a step whose mean
    /// KL per unit is above `λ` and divided by 1.1 otherwise.
    #[default]
    Adaptive,
}

const KL_WEIGHT_STEP: f64 = 1.1;
const KL_WEIGHT_MIN: f64 = 1e-3;

/// Next adaptive KL weight after a step with `kl_per_unit`.
pub fn adapt_kl_weight(weight: f64, kl_per_unit: f64, lambda: f64) -> f64 {
    let next = if kl_per_unit > lambda {
        weight * KL_WEIGHT_STEP
    } else {
        weight / KL_WEIGHT_STEP
    };
    next.clamp(KL_WEIGHT_MIN, 1.0)
}

/// `max(kl, λ·units)` on the tape; the gradient vanishes while clamped.
pub fn soft_free_bits(tape: &mut Tape, kl: Var, units: usize, lambda: f64) -> Result<Var> {
    if units == 0 {
        return Err(Error::invalid("free bits need at least one unit"));
    }
    if lambda == 0.0 {
        return Ok(kl);
    }
    tape.floor_scalar(kl, lambda * units as f64)
}

fn shape_kl(tape: &mut Tape, kl: Var, units: usize, settings: BoundSettings) -> Result<Var> {
    match settings.kl_weight {
        Some(w) => tape.scale(kl, w),
        None => soft_free_bits(tape, kl, units, settings.free_bits),
    }
}

fn noise_rows(ids: &[u64], cols: usize, draw: impl Fn(u64) -> Vec<f64>) -> Tensor {
    let data = ids.iter().flat_map(|&id| draw(id)).collect();
    Tensor::matrix(ids.len(), cols, data)
}

struct BoundVars {
    objective: Var,
    recon_r: Var,
    kl_r: Var,
    m_part: Option<(Var, Var)>,
    scale: f64,
}

/// Builds the bound on `tape`. `r` and `m` must already be sorted by id.
#[allow(clippy::too_many_arguments)]
fn bound_vars(
    model: &FnpModel,
    tape: &mut Tape,
    params: &Bound,
    r: &PointSet,
    m: &PointSet,
    m_total: usize,
    noise: &NoiseBundle,
    settings: BoundSettings,
) -> Result<BoundVars> {
    let cfg = model.config();
    let (d_u, d_z, nr) = (cfg.d_u, cfg.d_z, r.len());
    let concrete = cfg.concrete();
    let plus = cfg.variant == Variant::FnpPlus;
    let log_tau = model.log_tau_var(params);

    let xr = tape.constant(r.inputs.clone());
    let er = model.embed_vars(tape, params, xr)?;
    let u_r = gaussian_rsample(
        tape,
        er.u,
        noise_rows(&r.ids, d_u, |id| noise.normals(id, Role::U, d_u)),
    )?;
    let z_r = gaussian_rsample(
        tape,
        er.z,
        noise_rows(&r.ids, d_z, |id| noise.normals(id, Role::Z, d_z)),
    )?;
    let g_noise = noise_rows(&r.ids, nr, |id| noise.uniforms(id, Role::GRow, nr));
    let g = sample_dag_g(tape, u_r, log_tau, settings.mode, &g_noise, concrete)?;
    let (mu, nu) = model.reference_codes(tape, params, er.z, &r.targets)?;

    let prior_r = prior_z_vars(tape, g, mu, nu, cfg.epsilon)?;
    let kl_rows = gaussian_kl_rows(tape, er.z, prior_r)?;
    let kl_r = tape.sum(kl_rows)?;
    let head_r = model.predict_head(tape, params, z_r, plus.then_some(u_r))?;
    let ll_r = model.log_likelihood_rows(tape, head_r, &r.targets)?;
    let recon_r = tape.sum(ll_r)?;
    let kl_r_fb = shape_kl(tape, kl_r, nr * d_z, settings)?;
    let mut objective = tape.sub(recon_r, kl_r_fb)?;

    let mut m_part = None;
    let scale = if m.is_empty() {
        0.0
    } else {
        m_total as f64 / m.len() as f64
    };
    if !m.is_empty() {
        let xm = tape.constant(m.inputs.clone());
        let em = model.embed_vars(tape, params, xm)?;
        let u_m = gaussian_rsample(
            tape,
            em.u,
            noise_rows(&m.ids, d_u, |id| noise.normals(id, Role::U, d_u)),
        )?;
        let z_m = gaussian_rsample(
            tape,
            em.z,
            noise_rows(&m.ids, d_z, |id| noise.normals(id, Role::Z, d_z)),
        )?;
        let a_noise = noise_rows(&m.ids, nr, |id| noise.uniforms(id, Role::ARow, nr));
        let a = sample_bipartite_a(tape, u_m, u_r, log_tau, settings.mode, &a_noise, concrete)?;
        let prior_m = prior_z_vars(tape, a, mu, nu, cfg.epsilon)?;
        let kl_rows = gaussian_kl_rows(tape, em.z, prior_m)?;
        let kl_m = tape.sum(kl_rows)?;
        let head_m = model.predict_head(tape, params, z_m, plus.then_some(u_m))?;
        let ll_m = model.log_likelihood_rows(tape, head_m, &m.targets)?;
        let recon_m = tape.sum(ll_m)?;
        let kl_m_fb = shape_kl(tape, kl_m, m.len() * d_z, settings)?;
        let diff = tape.sub(recon_m, kl_m_fb)?;
        let scaled = tape.scale(diff, scale)?;
        objective = tape.add(objective, scaled)?;
        m_part = Some((recon_m, kl_m));
    }
    Ok(BoundVars {
        objective,
        recon_r,
        kl_r,
        m_part,
        scale,
    })
}

fn estimate(tape: &Tape, v: &BoundVars) -> BoundEstimate {
    let val = |x: Var| tape.value(x).item();
    let (recon_r, kl_r) = (val(v.recon_r), val(v.kl_r));
    let (recon_m, kl_m) = v.m_part.map_or((0.0, 0.0), |(a, b)| (val(a), val(b)));
    let l_r = recon_r - kl_r;
    let l_m = if v.m_part.is_some() {
        v.scale * (recon_m - kl_m)
    } else {
        0.0
    };
    BoundEstimate {
        l_r,
        l_m,
        total: l_r + l_m,
        recon_r,
        kl_r,
        recon_m,
        kl_m,
        objective: val(v.objective),
    }
}

fn check_finite(e: &BoundEstimate, step: usize) -> Result<()> {
    for (term, v) in [
        ("reconstruction over R", e.recon_r),
        ("KL over R", e.kl_r),
        ("reconstruction over M", e.recon_m),
        ("KL over M", e.kl_m),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                step,
            });
        }
    }
    Ok(())
}

fn check_batches(r: &PointSet, m: &PointSet, m_total: usize) -> Result<()> {
    if r.is_empty() {
        return Err(Error::invalid("the reference set is empty"));
    }
    if m.len() > m_total {
        return Err(Error::invalid(format!(
            "batch of {} exceeds |M| = {m_total}",
            m.len()
        )));
    }
    Ok(())
}

/// One-sample estimate of the bound on `{R, M̂}` with `M̂` standing in for
/// `m_total` points. Points are processed in identity order, so the result
/// does not depend on how either set is stored.
pub fn elbo_batch(
    model: &FnpModel,
    r: &PointSet,
    m_hat: &PointSet,
    m_total: usize,
    noise: &NoiseBundle,
    settings: BoundSettings,
) -> Result<BoundEstimate> {
    check_batches(r, m_hat, m_total)?;
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape, false);
    let vars = bound_vars(
        model,
        &mut tape,
        &params,
        &r.sorted(),
        &m_hat.sorted(),
        m_total,
        noise,
        settings,
    )?;
    Ok(estimate(&tape, &vars))
}

/// Bound estimate plus the gradient of the negated objective for every
/// parameter, in store order.
pub fn bound_gradients(
    model: &FnpModel,
    r: &PointSet,
    m_hat: &PointSet,
    m_total: usize,
    noise: &NoiseBundle,
    settings: BoundSettings,
) -> Result<(BoundEstimate, Vec<Tensor>)> {
    check_batches(r, m_hat, m_total)?;
    let mut tape = Tape::new();
    let params = model.params().bind(&mut tape, true);
    let vars = bound_vars(
        model,
        &mut tape,
        &params,
        &r.sorted(),
        &m_hat.sorted(),
        m_total,
        noise,
        settings,
    )?;
    let loss = tape.neg(vars.objective)?;
    let mut grads = tape.backward(loss)?;
    Ok((
        estimate(&tape, &vars),
        params.gradients(&mut grads, model.params()),
    ))
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam descent step on `params` given loss gradients.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *x -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub free_bits: f64,
    pub free_bits_mode: FreeBitsMode,
    pub patience: usize,
    pub seed: u64,
    /// Predictive draws per validation evaluation.
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 100,
            learning_rate: 1e-3,
            free_bits: 1.0,
            free_bits_mode: FreeBitsMode::default(),
            patience: 20,
            seed: 0,
            val_samples: 10,
        }
    }
}

/// One line of the metrics log. Values are epoch means over minibatches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bound_total: f64,
    pub bound_r: f64,
    pub bound_m: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (`None`: the final ones).
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,bound_total,bound_R,bound_M,val_metric\n");
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.bound_total, r.bound_r, r.bound_m, r.val_metric
        )
        .unwrap();
    }
    out
}

/// Accuracy for classification, mean predictive log density for regression;
/// larger is better.
pub fn validation_metric(
    model: &FnpModel,
    reference: &PointSet,
    val: &PointSet,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let summary = posterior_predictive(model, reference, &val.inputs, &val.ids, samples, seed)?;
    Ok(summary_metric(&summary, &val.targets))
}

/// Scores a predictive summary against targets: accuracy or mean log density.
pub fn summary_metric(summary: &PredictiveSummary, targets: &Targets) -> f64 {
    let n = targets.len() as f64;
    match targets {
        Targets::Classes { labels, .. } => {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| summary.probabilities(i).map(argmax) == Some(y))
                .count();
            hits as f64 / n
        }
        Targets::Values(ys) => {
            ys.iter()
                .enumerate()
                .map(|(i, &y)| summary.log_density(i, y).unwrap_or(f64::NEG_INFINITY))
                .sum::<f64>()
                / n
        }
    }
}

pub(crate) fn gradient_check(grads: &[Tensor], store: &ParamStore, step: usize) -> Result<()> {
    for ((name, _), g) in store.iter().zip(grads) {
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("gradient of {name}"),
                step,
            });
        }
    }
    Ok(())
}

/// Trains on `R` plus minibatches of `M`, keeping the parameters of the best
/// validation epoch. Without validation points every epoch runs and the
/// final parameters are kept; the metric column then repeats the bound.
pub fn train(
    model: &mut FnpModel,
    split: &ReferenceSplit,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(cfg.free_bits >= 0.0) {
        return Err(Error::invalid("free bits must be non-negative"));
    }
    split.check()?;
    let base = &split.base;
    let r = base.points(&split.reference).sorted();
    let val_rows = split.validation();
    let val = base.points(&val_rows);
    let m_total = split.remainder.len();
    let adaptive = cfg.free_bits_mode == FreeBitsMode::Adaptive && cfg.free_bits > 0.0;
    let mut settings = BoundSettings {
        mode: GraphMode::Relaxed,
        free_bits: cfg.free_bits,
        kl_weight: adaptive.then_some(1.0),
    };
    let d_z = model.config().d_z;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(model.params().values());
    let mut order = split.remainder.clone();
    let mut shuffler = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_seed = cfg.seed ^ 0x5a17_da7e;

    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffler);
        let batches: Vec<&[usize]> = if order.is_empty() {
            vec![&[]]
        } else {
            order.chunks(cfg.batch_size).collect()
        };
        let (mut sum_total, mut sum_r, mut sum_m) = (0.0, 0.0, 0.0);
        for rows in &batches {
            let m_hat = base.points(rows);
            let noise = NoiseBundle::training(cfg.seed, step);
            let (est, grads) = bound_gradients(model, &r, &m_hat, m_total, &noise, settings)?;
            check_finite(&est, step as usize)?;
            gradient_check(&grads, model.params(), step as usize)?;
            adam_step(model.params_mut().values_mut(), &grads, &mut state, adam)?;
            if let Some(w) = settings.kl_weight {
                let units = ((r.len() + m_hat.len()) * d_z) as f64;
                settings.kl_weight = Some(adapt_kl_weight(
                    w,
                    (est.kl_r + est.kl_m) / units,
                    cfg.free_bits,
                ));
            }
            sum_total += est.total;
            sum_r += est.l_r;
            sum_m += est.l_m;
            step += 1;
        }
        let nb = batches.len() as f64;
        let bound_total = sum_total / nb;
        let val_metric = if val.is_empty() {
            bound_total
        } else {
            validation_metric(model, &r, &val, cfg.val_samples.max(1), val_seed)?
        };
        records.push(EpochRecord {
            epoch,
            bound_total,
            bound_r: sum_r / nb,
            bound_m: sum_m / nb,
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
            _ => best = Some((val_metric, epoch, model.params().clone())),
        }
    }
    let best_epoch = best.map(|(_, epoch, params)| {
        model
            .params_mut()
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_toy1, select_reference_set};
    use crate::model::{ModelConfig, TaskKind};
    use approx::assert_relative_eq;

    #[test]
    fn adam_first_step() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Tensor::scalar(1.0)],
            &mut s,
            AdamConfig::with_lr(1e-3),
        )
        .unwrap();
        assert_relative_eq!(p[0].item(), -9.999_999_9e-4, max_relative = 1e-12);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_zero_gradient_and_independence() {
        let mut p = vec![Tensor::row_vector(vec![0.5, -0.5]), Tensor::scalar(2.0)];
        let mut s = AdamState::new(&p);
        let g = vec![Tensor::row_vector(vec![0.0, 3.0]), Tensor::scalar(0.0)];
        adam_step(&mut p, &g, &mut s, AdamConfig::with_lr(0.1)).unwrap();
        assert_eq!(p[0].data()[0], 0.5);
        assert_eq!(p[1].item(), 2.0);
        assert!(p[0].data()[1] < -0.5);
        let bad = vec![Tensor::scalar(1.0), Tensor::scalar(1.0)];
        assert!(adam_step(&mut p, &bad, &mut s, AdamConfig::with_lr(0.1)).is_err());
    }

    #[test]
    fn free_bits_examples() {
        let mut tape = Tape::new();
        let kl = tape.leaf(Tensor::scalar(2.0 * 6.0));
        let out = soft_free_bits(&mut tape, kl, 6, 1.0).unwrap();
        assert_eq!(tape.value(out).item(), 12.0);
        let low = tape.leaf(Tensor::scalar(0.3 * 6.0));
        let clamped = soft_free_bits(&mut tape, low, 6, 1.0).unwrap();
        assert_eq!(tape.value(clamped).item(), 6.0);
        let grads = tape.backward(clamped).unwrap();
        assert!(grads.get(low).is_none_or(|g| g.item() == 0.0));
        let same = soft_free_bits(&mut tape, low, 6, 0.0).unwrap();
        assert_eq!(same, low);
    }

    #[test]
    fn kl_weight_adapts_within_bounds() {
        assert_relative_eq!(adapt_kl_weight(0.5, 2.0, 1.0), 0.55, max_relative = 1e-12);
        assert_relative_eq!(adapt_kl_weight(0.55, 0.3, 1.0), 0.5, max_relative = 1e-12);
        assert_eq!(adapt_kl_weight(1.0, 5.0, 1.0), 1.0);
        assert_eq!(adapt_kl_weight(KL_WEIGHT_MIN, 0.0, 1.0), KL_WEIGHT_MIN);
    }

    fn toy_model(seed: u64) -> FnpModel {
        FnpModel::new(
            ModelConfig {
                input_dim: 1,
                d_u: 2,
                d_z: 4,
                variant: Variant::Fnp,
                task: TaskKind::Regression,
                epsilon: 1e-8,
                temperature: 0.3,
                torso_hidden: vec![16],
                head_hidden: vec![16],
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn full_batch_has_unit_scale_and_sums() {
        let split = select_reference_set(gen_toy1(0), 10, 1).unwrap();
        let model = toy_model(2);
        let r = split.base.points(&split.reference);
        let m = split.base.points(&split.remainder);
        let e = elbo_batch(
            &model,
            &r,
            &m,
            m.len(),
            &NoiseBundle::training(0, 0),
            BoundSettings::default(),
        )
        .unwrap();
        assert_relative_eq!(e.l_m, e.recon_m - e.kl_m, epsilon = 1e-12);
        assert_eq!(e.total, e.l_r + e.l_m);
        assert!(elbo_batch(
            &model,
            &m.select(&[]),
            &m,
            m.len(),
            &NoiseBundle::training(0, 0),
            BoundSettings::default()
        )
        .is_err());
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let split = select_reference_set(gen_toy1(0), 10, 1).unwrap();
        let mut model = toy_model(3);
        let before = model.params().clone();
        let report = train(
            &mut model,
            &split,
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(report.records.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn metrics_header() {
        let csv = metrics_csv(&[EpochRecord {
            epoch: 1,
            bound_total: -3.5,
            bound_r: -1.0,
            bound_m: -2.5,
            val_metric: 0.25,
        }]);
        assert_eq!(
            csv,
            "epoch,bound_total,bound_R,bound_M,val_metric\n1,-3.5,-1,-2.5,0.25\n"
        );
    }
}
