//! The FNP and FNP⁺ generative components.
//!
//! A shared torso maps each input to a hidden representation `h`; two affine
//! heads turn `h` into a Gaussian over the embedding `u` and a Gaussian
//! posterior over the local latent `z`. Embeddings of the reference set `R`
//! define a DAG `G` among reference points (ordered by [`scalar_ordering_t`])
//! and a bipartite graph `A` from `R` to every other point, with edge
//! probabilities given by the RBF kernel [`kernel_g`]. A point's prior over
//! `z` averages the label-conditioned codes of its sampled parents, and the
//! prediction head reads `z` (plus `u` for FNP⁺).
//!
//! Everything here works on a [`Tape`] so the same code serves training
//! (relaxed graphs, gradients) and evaluation (hard graphs, constants).

use serde::{Deserialize, Serialize};

use crate::datasets::Targets;
use crate::distributions::{
    self, bernoulli_sample, binary_concrete_rsample, gaussian_kl_rows, gaussian_log_prob_rows,
    std_normal_log_cdf, ConcreteConfig, DiagGaussianParams, GaussianVars, HALF_LN_2PI,
};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Fnp,
    FnpPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
}

impl TaskKind {
    /// Width of the label encoding fed to the label embedding.
    pub fn label_width(&self) -> usize {
        match self {
            TaskKind::Classification { num_classes } => *num_classes,
            TaskKind::Regression => 1,
        }
    }

    /// Width of the prediction head's raw output.
    pub fn head_width(&self) -> usize {
        match self {
            TaskKind::Classification { num_classes } => *num_classes,
            TaskKind::Regression => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    /// Binary concrete edges, differentiable.
    Relaxed,
    /// Thresholded Bernoulli edges.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub d_u: usize,
    pub d_z: usize,
    pub variant: Variant,
    pub task: TaskKind,
    /// Added to the parent count before taking its reciprocal.
    pub epsilon: f64,
    pub temperature: f64,
    /// Hidden widths of the shared torso; its last width is `h`.
    pub torso_hidden: Vec<usize>,
    /// Hidden widths of the prediction head (empty for a linear head).
    pub head_hidden: Vec<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_u == 0 || self.d_z == 0 || self.input_dim == 0 {
            return Err(Error::invalid(
                "input_dim, d_u and d_z must all be at least 1",
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        ConcreteConfig::new(self.temperature)?;
        if let TaskKind::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::invalid("classification needs at least two classes"));
            }
        }
        if self.torso_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn concrete(&self) -> ConcreteConfig {
        ConcreteConfig::new(self.temperature).expect("validated temperature")
    }

    fn head_input(&self) -> usize {
        match self.variant {
            Variant::Fnp => self.d_z,
            Variant::FnpPlus => self.d_z + self.d_u,
        }
    }
}

/// RBF kernel scale, stored as `ln τ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub log_tau: f64,
}

impl KernelParams {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

/// `g(a, b) = exp(−τ/2 · ‖a − b‖²)`.
pub fn kernel_g(a: &[f64], b: &[f64], k: KernelParams) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-0.5 * k.tau() * sq).exp()
}

/// `t(u) = Σ_k ln Φ(u_k)`, strictly increasing in every coordinate.
pub fn scalar_ordering_t(u: &[f64]) -> f64 {
    u.iter().map(|&x| std_normal_log_cdf(x)).sum()
}

/// `𝕀[t(u_i) > t(u_j)]` for every pair of reference rows; ties give 0.
pub fn ordering_mask(u_r: &Tensor) -> Tensor {
    let n = u_r.rows();
    let t: Vec<f64> = (0..n).map(|i| scalar_ordering_t(u_r.row(i))).collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if t[i] > t[j] {
                data[i * n + j] = 1.0;
            }
        }
    }
    Tensor::matrix(n, n, data)
}

/// Kernel matrix `g(a_i, b_j)` and its elementwise log on the tape.
/// `log_tau` is a `1×1` variable.
pub fn kernel_matrix(tape: &mut Tape, a: Var, b: Var, log_tau: Var) -> Result<(Var, Var)> {
    let n = tape.value(a).rows();
    let d2 = tape.pairwise_sq_dist(a, b)?;
    let tau = tape.exp(log_tau)?;
    let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let tau_col = tape.matmul(ones, tau)?;
    let scaled = tape.mul_col(d2, tau_col)?;
    let log_g = tape.scale(scaled, -0.5)?;
    let g = tape.exp(log_g)?;
    Ok((g, log_g))
}

/// Samples edges from probabilities `g` (with `ln g` supplied for a stable
/// logit). Relaxed mode draws binary concrete values, hard mode thresholds.
fn sample_edges(
    tape: &mut Tape,
    g: Var,
    log_g: Var,
    mode: GraphMode,
    noise: &Tensor,
    cfg: ConcreteConfig,
) -> Result<Var> {
    if noise.shape() != tape.value(g).shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_edges",
            lhs: tape.value(g).shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    match mode {
        GraphMode::Relaxed => {
            let neg = tape.neg(g)?;
            let one_minus = tape.add_scalar(neg, 1.0)?;
            let log_one_minus = tape.log(one_minus)?;
            let logit = tape.sub(log_g, log_one_minus)?;
            binary_concrete_rsample(tape, logit, cfg, noise)
        }
        GraphMode::Hard => {
            let probs = tape.value(g);
            let data = probs
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&p, &u)| f64::from(u8::from(bernoulli_sample(p, u))))
                .collect();
            let t = Tensor::new(probs.shape().to_vec(), data)?;
            Ok(tape.constant(t))
        }
    }
}

/// Bipartite graph from reference rows `u_r` to query rows `u_m`.
pub fn sample_bipartite_a(
    tape: &mut Tape,
    u_m: Var,
    u_r: Var,
    log_tau: Var,
    mode: GraphMode,
    noise: &Tensor,
    cfg: ConcreteConfig,
) -> Result<Var> {
    if tape.value(u_r).rows() == 0 {
        return Err(Error::invalid("the reference set is empty"));
    }
    let (g, log_g) = kernel_matrix(tape, u_m, u_r, log_tau)?;
    sample_edges(tape, g, log_g, mode, noise, cfg)
}

/// DAG among reference rows. The ordering indicator stays hard in both
/// modes; only the Bernoulli part is relaxed.
pub fn sample_dag_g(
    tape: &mut Tape,
    u_r: Var,
    log_tau: Var,
    mode: GraphMode,
    noise: &Tensor,
    cfg: ConcreteConfig,
) -> Result<Var> {
    if tape.value(u_r).rows() == 0 {
        return Err(Error::invalid("the reference set is empty"));
    }
    let mask = tape.constant(ordering_mask(tape.value(u_r)));
    let (g, log_g) = kernel_matrix(tape, u_r, u_r, log_tau)?;
    match mode {
        GraphMode::Relaxed => {
            let edges = sample_edges(tape, g, log_g, mode, noise, cfg)?;
            tape.mul(edges, mask)
        }
        GraphMode::Hard => {
            let masked = tape.mul(g, mask)?;
            let probs = tape.value(masked).clone();
            let data = probs
                .data()
                .iter()
                .zip(noise.data())
                .map(|(&p, &u)| f64::from(u8::from(bernoulli_sample(p, u))))
                .collect();
            if noise.shape() != probs.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sample_dag_g",
                    lhs: probs.shape().to_vec(),
                    rhs: noise.shape().to_vec(),
                });
            }
            Ok(tape.constant(Tensor::new(probs.shape().to_vec(), data)?))
        }
    }
}

/// Parent-averaged prior over `z`: with `C_i = 1/(Σ_j w_ij + ε)`,
/// `mean = C_i Σ_j w_ij μ_j` and `logvar = C_i Σ_j w_ij ν_j`.
pub fn prior_z_vars(
    tape: &mut Tape,
    parents: Var,
    mu_theta: Var,
    nu_theta: Var,
    epsilon: f64,
) -> Result<GaussianVars> {
    let mean_sum = tape.matmul(parents, mu_theta)?;
    let logvar_sum = tape.matmul(parents, nu_theta)?;
    let count = tape.sum_rows(parents)?;
    let shifted = tape.add_scalar(count, epsilon)?;
    let c = tape.reciprocal(shifted)?;
    let mean = tape.mul_col(mean_sum, c)?;
    let logvar = tape.mul_col(logvar_sum, c)?;
    GaussianVars::new(tape, mean, logvar)
}

/// Single-row form of [`prior_z_vars`] on plain values. `mu_theta` and
/// `nu_theta` hold one label-conditioned code per reference point.
pub fn prior_z_params(
    parent_row: &[f64],
    mu_theta: &[Vec<f64>],
    nu_theta: &[Vec<f64>],
    epsilon: f64,
) -> Result<DiagGaussianParams> {
    if parent_row.len() != mu_theta.len() || mu_theta.len() != nu_theta.len() {
        return Err(Error::ShapeMismatch {
            op: "prior_z_params",
            lhs: vec![parent_row.len()],
            rhs: vec![mu_theta.len(), nu_theta.len()],
        });
    }
    if parent_row.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::invalid("parent weights must lie in [0, 1]"));
    }
    let dim = mu_theta.first().map_or(0, Vec::len);
    let c = 1.0 / (parent_row.iter().sum::<f64>() + epsilon);
    let average = |codes: &[Vec<f64>]| -> Vec<f64> {
        (0..dim)
            .map(|k| {
                c * parent_row
                    .iter()
                    .zip(codes)
                    .map(|(w, code)| w * code[k])
                    .sum::<f64>()
            })
            .collect()
    };
    DiagGaussianParams::new(average(mu_theta), average(nu_theta))
}

/// Tape handles for one batch's embedding outputs.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingVars {
    pub u: GaussianVars,
    pub z: GaussianVars,
}

/// Likelihood parameters for one point.
#[derive(Clone, Debug, PartialEq)]
pub enum Likelihood {
    Categorical(Vec<f64>),
    Gaussian { mean: f64, std: f64 },
}

/// `σ = 0.1 + 0.9·softplus(d)`.
pub fn heteroscedastic_std(d: f64) -> f64 {
    0.1 + 0.9 * crate::tensor::softplus(d)
}

#[derive(Clone, Debug)]
struct Heads {
    torso: Option<Mlp>,
    u_mean: Linear,
    u_logvar: Linear,
    z_mean: Linear,
    z_logvar: Linear,
    label_mean: Linear,
    label_logvar: Linear,
    log_tau: ParamId,
    predictor: Mlp,
}

/// Parameters and architecture of an FNP or FNP⁺.
#[derive(Clone, Debug)]
pub struct FnpModel {
    config: ModelConfig,
    params: ParamStore,
    heads: Heads,
}

impl FnpModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        let torso = if config.torso_hidden.is_empty() {
            None
        } else {
            let mut sizes = vec![config.input_dim];
            sizes.extend(&config.torso_hidden);
            Some(Mlp::new(&mut params, &mut init, "torso", &sizes, true)?)
        };
        let h = config
            .torso_hidden
            .last()
            .copied()
            .unwrap_or(config.input_dim);
        let u_mean = Linear::new(&mut params, &mut init, "u_head.mean", h, config.d_u)?;
        let u_logvar = Linear::new(&mut params, &mut init, "u_head.logvar", h, config.d_u)?;
        let z_mean = Linear::new(&mut params, &mut init, "z_head.mean", h, config.d_z)?;
        let z_logvar = Linear::new(&mut params, &mut init, "z_head.logvar", h, config.d_z)?;
        let lw = config.task.label_width();
        // Zero label offsets: the initial prior is the parents' posterior codes.
        let label_mean = Linear::zeros(&mut params, "label.mean", lw, config.d_z)?;
        let label_logvar = Linear::zeros(&mut params, "label.logvar", lw, config.d_z)?;
        let log_tau = params.add("kernel.log_tau", Tensor::matrix(1, 1, vec![0.0]))?;
        let mut sizes = vec![config.head_input()];
        sizes.extend(&config.head_hidden);
        sizes.push(config.task.head_width());
        let predictor = Mlp::new(&mut params, &mut init, "predictor", &sizes, false)?;
        Ok(FnpModel {
            config,
            params,
            heads: Heads {
                torso,
                u_mean,
                u_logvar,
                z_mean,
                z_logvar,
                label_mean,
                label_logvar,
                log_tau,
                predictor,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn kernel(&self) -> KernelParams {
        KernelParams {
            log_tau: self.params.get(self.heads.log_tau).item(),
        }
    }

    pub fn log_tau_var(&self, bound: &Bound) -> Var {
        bound.var(self.heads.log_tau)
    }

    /// Both heads applied to the shared torso output, one row per input.
    pub fn embed_vars(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<EmbeddingVars> {
        let h = match &self.heads.torso {
            Some(torso) => torso.forward(tape, bound, x)?,
            None => x,
        };
        let um = self.heads.u_mean.forward(tape, bound, h)?;
        let ul = self.heads.u_logvar.forward(tape, bound, h)?;
        let zm = self.heads.z_mean.forward(tape, bound, h)?;
        let zl = self.heads.z_logvar.forward(tape, bound, h)?;
        Ok(EmbeddingVars {
            u: GaussianVars::new(tape, um, ul)?,
            z: GaussianVars::new(tape, zm, zl)?,
        })
    }

    /// Embedding and posterior parameters for every row of `x`.
    pub fn embed(&self, x: &Tensor) -> Result<Vec<(DiagGaussianParams, DiagGaussianParams)>> {
        if x.rows() == 0 || x.is_empty() {
            return Err(Error::invalid("embed needs a non-empty batch"));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let e = self.embed_vars(&mut tape, &bound, xv)?;
        Ok((0..x.rows())
            .map(|i| (e.u.row(&tape, i), e.z.row(&tape, i)))
            .collect())
    }

    /// Label-conditioned reference codes `μ_θ = μ_q + μ_y`, `ν_θ = ν_q + ν_y`.
    pub fn reference_codes(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z_post_r: GaussianVars,
        y_r: &Targets,
    ) -> Result<(Var, Var)> {
        let y = tape.constant(y_r.encode(self.config.task)?);
        let my = self.heads.label_mean.forward(tape, bound, y)?;
        let ny = self.heads.label_logvar.forward(tape, bound, y)?;
        let mu = tape.add(z_post_r.mean, my)?;
        let nu = tape.add(z_post_r.logvar, ny)?;
        Ok((mu, nu))
    }

    /// Raw prediction-head output: class logits, or `(mean, d)` columns for
    /// regression. `u` must be given exactly when the variant is FNP⁺.
    pub fn predict_head(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        u: Option<Var>,
    ) -> Result<Var> {
        let input = match (self.config.variant, u) {
            (Variant::Fnp, None) => z,
            (Variant::FnpPlus, Some(u)) => tape.concat(z, u)?,
            (Variant::Fnp, Some(_)) => {
                return Err(Error::invalid("plain FNP prediction does not take u"))
            }
            (Variant::FnpPlus, None) => return Err(Error::invalid("FNP+ prediction needs u")),
        };
        let act = tape.relu(input)?;
        self.heads.predictor.forward(tape, bound, act)
    }

    /// Per-row log-likelihood of `targets` under the head output.
    pub fn log_likelihood_rows(
        &self,
        tape: &mut Tape,
        head: Var,
        targets: &Targets,
    ) -> Result<Var> {
        log_likelihood_rows(tape, self.config.task, head, targets)
    }

    /// Reads likelihood parameters off an evaluated head output.
    pub fn likelihoods(&self, head: &Tensor) -> Vec<Likelihood> {
        likelihoods(self.config.task, head)
    }

    /// `Σ_{i∈R} [log N(z_i; prior from G row i) + log p(y_i | z_i[, u_i])]`
    /// for explicit reference embeddings and latents.
    pub fn log_joint_r(
        &self,
        x_r: &Tensor,
        u_r: &Tensor,
        z_r: &Tensor,
        y_r: &Targets,
        g: &Tensor,
    ) -> Result<f64> {
        let n = x_r.rows();
        if g.shape() != [n, n] || z_r.rows() != n || u_r.rows() != n || y_r.len() != n {
            return Err(Error::invalid("log_joint_r inputs disagree on |R|"));
        }
        if (0..n).any(|i| g.data()[i * n + i] != 0.0) {
            return Err(Error::invalid("G must have a zero diagonal"));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x_r.clone());
        let emb = self.embed_vars(&mut tape, &bound, xv)?;
        let (mu, nu) = self.reference_codes(&mut tape, &bound, emb.z, y_r)?;
        let gv = tape.constant(g.clone());
        let prior = prior_z_vars(&mut tape, gv, mu, nu, self.config.epsilon)?;
        let zv = tape.constant(z_r.clone());
        let lp = gaussian_log_prob_rows(&mut tape, zv, prior)?;
        let uv = tape.constant(u_r.clone());
        let u_in = (self.config.variant == Variant::FnpPlus).then_some(uv);
        let head = self.predict_head(&mut tape, &bound, zv, u_in)?;
        let ll = self.log_likelihood_rows(&mut tape, head, y_r)?;
        let total = tape.add(lp, ll)?;
        let s = tape.sum(total)?;
        Ok(tape.value(s).item())
    }

    /// Per-row KL between posterior `q` and prior `p` (re-exported for callers
    /// assembling bounds).
    pub fn kl_rows(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var> {
        gaussian_kl_rows(tape, q, p)
    }
}

pub(crate) fn log_likelihood_rows(
    tape: &mut Tape,
    task: TaskKind,
    head: Var,
    targets: &Targets,
) -> Result<Var> {
    let enc = tape.constant(targets.encode(task)?);
    match task {
        TaskKind::Classification { .. } => {
            let lsm = tape.log_softmax(head)?;
            let picked = tape.mul(lsm, enc)?;
            tape.sum_rows(picked)
        }
        TaskKind::Regression => {
            let mean = tape.slice_cols(head, 0, 1)?;
            let d = tape.slice_cols(head, 1, 1)?;
            let sp = tape.softplus(d)?;
            let scaled = tape.scale(sp, 0.9)?;
            let std = tape.add_scalar(scaled, 0.1)?;
            let resid = tape.sub(enc, mean)?;
            let inv = tape.reciprocal(std)?;
            let standardized = tape.mul(resid, inv)?;
            let sq = tape.square(standardized)?;
            let half_sq = tape.scale(sq, -0.5)?;
            let log_std = tape.log(std)?;
            let ll = tape.sub(half_sq, log_std)?;
            tape.add_scalar(ll, -HALF_LN_2PI)
        }
    }
}

pub(crate) fn likelihoods(task: TaskKind, head: &Tensor) -> Vec<Likelihood> {
    (0..head.rows())
        .map(|i| {
            let row = head.row(i);
            match task {
                TaskKind::Classification { .. } => Likelihood::Categorical(softmax(row)),
                TaskKind::Regression => Likelihood::Gaussian {
                    mean: row[0],
                    std: heteroscedastic_std(row[1]),
                },
            }
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Convenience re-export so callers can build standard-normal priors.
pub fn standard_prior(dim: usize) -> DiagGaussianParams {
    distributions::DiagGaussianParams::standard(dim)
}
