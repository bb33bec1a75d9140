//! Checks shared by the property tests and the acceptance harness.

#![allow(dead_code)]

use fnproc::datasets::{gen_toy1, select_reference_set, PointSet, ReferenceSplit};
use fnproc::distributions::{
    gaussian_kl, gaussian_kl_rows, gaussian_log_prob, gaussian_rsample, gaussian_sample,
    ConcreteConfig, DiagGaussianParams,
};
use fnproc::model::{
    kernel_g, ordering_mask, prior_z_params, prior_z_vars, sample_bipartite_a, sample_dag_g,
    FnpModel, GraphMode, KernelParams, ModelConfig, TaskKind, Variant,
};
use fnproc::tensor::{finite_diff_grad, OpKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
}

/// `|g − fd| ≤ rel·max(|g|, |fd|)`, or below `abs` near zero.
pub fn close(g: f64, fd: f64, rel: f64, abs: f64) -> bool {
    let diff = (g - fd).abs();
    diff <= rel * g.abs().max(fd.abs()) || diff < abs
}

/// Largest relative gradient error (entries under `abs` count as zero).
pub fn worst_error(grad: &Tensor, fd: &Tensor, abs: f64) -> f64 {
    grad.data()
        .iter()
        .zip(fd.data())
        .map(|(&g, &f)| {
            let diff = (g - f).abs();
            if diff.is_nan() {
                f64::INFINITY
            } else if diff < abs {
                0.0
            } else {
                diff / g.abs().max(f.abs())
            }
        })
        .fold(0.0, f64::max)
}

fn away_from(x: f64, kink: f64) -> f64 {
    if (x - kink).abs() < 0.05 {
        kink + 0.1f64.copysign(x - kink)
    } else {
        x
    }
}

/// Every differentiable primitive with inputs kept away from its kinks.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "relu",
    "softplus",
    "exp",
    "log",
    "sigmoid",
    "neg",
    "sum",
    "mean",
    "concat",
    "broadcast_add_row",
    "scale",
    "add_scalar",
    "square",
    "reciprocal",
    "clamp",
    "sum_rows",
    "mul_col",
    "log_softmax",
    "slice_rows",
    "slice_cols",
    "pairwise_sq_dist",
    "floor_scalar",
];

fn primitive_case(name: &str, rng: &mut ChaCha8Rng) -> (OpKind, Vec<Tensor>) {
    let mut m = |r: usize, c: usize| uniform_tensor(rng, &[r, c], -3.0, 3.0);
    let (op, inputs) = match name {
        "matmul" => (OpKind::MatMul, vec![m(3, 4), m(4, 2)]),
        "add" => (OpKind::Add, vec![m(3, 4), m(3, 4)]),
        "sub" => (OpKind::Sub, vec![m(3, 4), m(3, 4)]),
        "mul" => (OpKind::Mul, vec![m(3, 4), m(3, 4)]),
        "relu" => (OpKind::Relu, vec![m(3, 4).map(|x| away_from(x, 0.0))]),
        "softplus" => (OpKind::Softplus, vec![m(3, 4)]),
        "exp" => (OpKind::Exp, vec![m(3, 4)]),
        "log" => (OpKind::Log, vec![m(3, 4).map(|x| x.abs() + 0.1)]),
        "sigmoid" => (OpKind::Sigmoid, vec![m(3, 4)]),
        "neg" => (OpKind::Neg, vec![m(3, 4)]),
        "sum" => (OpKind::Sum, vec![m(3, 4)]),
        "mean" => (OpKind::Mean, vec![m(3, 4)]),
        "concat" => (OpKind::ConcatLastDim, vec![m(3, 2), m(3, 3)]),
        "broadcast_add_row" => (OpKind::BroadcastAddRow, vec![m(3, 4), m(1, 4)]),
        "scale" => {
            let c = m(1, 1).item();
            (OpKind::Scale(c), vec![m(3, 4)])
        }
        "add_scalar" => {
            let c = m(1, 1).item();
            (OpKind::AddScalar(c), vec![m(3, 4)])
        }
        "square" => (OpKind::Square, vec![m(3, 4)]),
        "reciprocal" => (
            OpKind::Reciprocal,
            vec![m(3, 4).map(|x| (x.abs() + 0.5).copysign(x))],
        ),
        "clamp" => (
            OpKind::Clamp(-1.0, 1.5),
            vec![m(3, 4).map(|x| away_from(away_from(x, -1.0), 1.5))],
        ),
        "sum_rows" => (OpKind::SumRows, vec![m(3, 4)]),
        "mul_col" => (OpKind::MulCol, vec![m(3, 4), m(3, 1)]),
        "log_softmax" => (OpKind::LogSoftmax, vec![m(3, 4)]),
        "slice_rows" => (OpKind::SliceRows { start: 1, len: 2 }, vec![m(4, 3)]),
        "slice_cols" => (OpKind::SliceCols { start: 1, len: 2 }, vec![m(3, 4)]),
        "pairwise_sq_dist" => (OpKind::PairwiseSqDist, vec![m(3, 2), m(4, 2)]),
        "floor_scalar" => (
            OpKind::FloorScalar(0.0),
            vec![Tensor::scalar(away_from(m(1, 1).item(), 0.0))],
        ),
        other => panic!("unknown primitive {other}"),
    };
    (op, inputs)
}

/// Weighted sum `Σ w ⊙ op(inputs)` so every output entry matters.
fn weighted_loss(tape: &mut Tape, op: OpKind, inputs: &[Var], weights: &Tensor) -> Var {
    let out = tape.apply(op, inputs).unwrap();
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Worst relative error between backward and central differences
/// (step 1e-5) for one random instance of `name`.
pub fn primitive_gradient_error(name: &str, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let (op, inputs) = primitive_case(name, &mut rng);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = tape.apply(op, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = uniform_tensor(&mut rng, &out_shape, -1.0, 1.0);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = weighted_loss(&mut tape, op, &vars, &weights);
    let mut grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads
            .take(vars[k])
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let fd = finite_diff_grad(
            |probe| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let loss = weighted_loss(&mut tape, op, &vars, &weights);
                tape.value(loss).item()
            },
            x,
            1e-5,
        );
        worst = worst.max(worst_error(&analytic, &fd, 1e-7));
    }
    worst
}

pub fn small_config(variant: Variant, task: TaskKind, input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        d_u: 2,
        d_z: 3,
        variant,
        task,
        epsilon: 1e-8,
        temperature: 0.3,
        torso_hidden: vec![8],
        head_hidden: vec![8],
    }
}

/// Perturbs every parameter so label offsets and heads are non-trivial.
pub fn jittered_model(config: ModelConfig, seed: u64) -> FnpModel {
    let mut model = FnpModel::new(config, seed).unwrap();
    let mut rng = rng(seed ^ 0x9e37);
    for t in model.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    model
}

/// `x → u, z → relaxed A → prior → Σ KL(q(z_M) ‖ prior)` with the noise
/// fixed by `seed`, as a function of the stacked inputs `[x_R; x_M]`.
pub struct CompositeMap {
    model: FnpModel,
    targets_r: fnproc::datasets::Targets,
    n_r: usize,
    u_noise_r: Tensor,
    u_noise_m: Tensor,
    a_noise: Tensor,
}

impl CompositeMap {
    pub fn new(seed: u64, n_r: usize, n_m: usize) -> (Self, Tensor) {
        let config = small_config(Variant::Fnp, TaskKind::Regression, 2);
        let model = jittered_model(config, seed);
        let mut rng = rng(seed);
        let x = uniform_tensor(&mut rng, &[n_r + n_m, 2], -1.5, 1.5);
        let targets_r = fnproc::datasets::Targets::Values(
            (0..n_r).map(|_| rng.random_range(-1.0..1.0)).collect(),
        );
        let map = CompositeMap {
            targets_r,
            n_r,
            u_noise_r: normal_tensor(&mut rng, n_r, 2),
            u_noise_m: normal_tensor(&mut rng, n_m, 2),
            a_noise: uniform_tensor(&mut rng, &[n_m, n_r], 0.0, 1.0),
            model,
        };
        (map, x)
    }

    fn build(&self, tape: &mut Tape, x: Var) -> Var {
        let params = self.model.params().bind(tape, false);
        let n = tape.value(x).rows();
        let xr = tape.slice_rows(x, 0, self.n_r).unwrap();
        let xm = tape.slice_rows(x, self.n_r, n - self.n_r).unwrap();
        let er = self.model.embed_vars(tape, &params, xr).unwrap();
        let em = self.model.embed_vars(tape, &params, xm).unwrap();
        let u_r = gaussian_rsample(tape, er.u, self.u_noise_r.clone()).unwrap();
        let u_m = gaussian_rsample(tape, em.u, self.u_noise_m.clone()).unwrap();
        let log_tau = self.model.log_tau_var(&params);
        let cfg = ConcreteConfig::new(0.3).unwrap();
        let a = sample_bipartite_a(
            tape,
            u_m,
            u_r,
            log_tau,
            GraphMode::Relaxed,
            &self.a_noise,
            cfg,
        )
        .unwrap();
        let (mu, nu) = self
            .model
            .reference_codes(tape, &params, er.z, &self.targets_r)
            .unwrap();
        let prior = prior_z_vars(tape, a, mu, nu, 1e-8).unwrap();
        let kl = gaussian_kl_rows(tape, em.z, prior).unwrap();
        tape.sum(kl).unwrap()
    }

    pub fn value(&self, x: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.build(&mut tape, xv);
        tape.value(out).item()
    }

    pub fn gradient(&self, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = self.build(&mut tape, xv);
        tape.backward(out).unwrap().take(xv).unwrap()
    }
}

pub fn composite_gradient_error(seed: u64) -> f64 {
    let (map, x) = CompositeMap::new(seed, 4, 3);
    let fd = finite_diff_grad(|p| map.value(p), &x, 1e-5);
    worst_error(&map.gradient(&x), &fd, 1e-7)
}

/// Kahn's algorithm on a 0/1 adjacency matrix.
pub fn is_acyclic(adj: &Tensor) -> bool {
    let n = adj.rows();
    let mut indegree: Vec<usize> = (0..n)
        .map(|j| (0..n).filter(|&i| adj.row(i)[j] != 0.0).count())
        .collect();
    let mut ready: Vec<usize> = (0..n).filter(|&j| indegree[j] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for (j, &edge) in adj.row(i).iter().enumerate() {
            if edge != 0.0 {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.push(j);
                }
            }
        }
    }
    seen == n
}

/// One hard DAG draw over random embeddings.
pub struct DagDraw {
    pub u: Tensor,
    pub log_tau: f64,
    pub graph: Tensor,
}

pub fn draw_dag(seed: u64, max_r: usize) -> DagDraw {
    let mut rng = rng(seed);
    let n = rng.random_range(1..=max_r);
    let d = rng.random_range(1..=4);
    let u = normal_tensor(&mut rng, n, d).map(|v| 1.5 * v);
    let log_tau = rng.random_range(-3.0..1.0);
    let noise = uniform_tensor(&mut rng, &[n, n], 0.0, 1.0);
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let lt = tape.constant(Tensor::matrix(1, 1, vec![log_tau]));
    let g = sample_dag_g(
        &mut tape,
        uv,
        lt,
        GraphMode::Hard,
        &noise,
        ConcreteConfig::new(0.3).unwrap(),
    )
    .unwrap();
    DagDraw {
        graph: tape.value(g).clone(),
        u,
        log_tau,
    }
}

/// Hard edge probabilities `𝕀[t(u_i) > t(u_j)]·g(u_i, u_j)`.
pub fn edge_probabilities(u: &Tensor, log_tau: f64) -> Tensor {
    let mask = ordering_mask(u);
    let n = u.rows();
    let k = KernelParams { log_tau };
    let data = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| mask.row(i)[j] * kernel_g(u.row(i), u.row(j), k))
        .collect();
    Tensor::matrix(n, n, data)
}

/// `G_ii = 0`, acyclic, and `p_ij·p_ji = 0` for every pair.
pub fn dag_draw_ok(draw: &DagDraw) -> bool {
    let n = draw.graph.rows();
    let p = edge_probabilities(&draw.u, draw.log_tau);
    (0..n).all(|i| draw.graph.row(i)[i] == 0.0)
        && is_acyclic(&draw.graph)
        && (0..n).all(|i| (0..n).all(|j| p.row(i)[j] * p.row(j)[i] == 0.0))
}

pub fn toy_split(reference: usize, seed: u64) -> ReferenceSplit {
    select_reference_set(gen_toy1(seed), reference, seed).unwrap()
}

pub fn toy_sets(reference: usize, seed: u64) -> (PointSet, PointSet) {
    let split = toy_split(reference, seed);
    (
        split.base.points(&split.reference),
        split.base.points(&split.remainder),
    )
}

/// Mean and standard error of `samples`.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Setup for the `|R| = 2, |M| = 1` oracle with point-mass embeddings.
pub struct EnumerationCase {
    pub u_r: Tensor,
    pub u_m: Tensor,
    pub log_tau: f64,
    pub q: DiagGaussianParams,
    pub mu: Vec<Vec<f64>>,
    pub nu: Vec<Vec<f64>>,
}

impl EnumerationCase {
    pub fn new() -> Self {
        EnumerationCase {
            u_r: Tensor::matrix(2, 2, vec![0.2, -0.4, 1.1, 0.5]),
            u_m: Tensor::matrix(1, 2, vec![0.6, 0.1]),
            log_tau: 0.0,
            q: DiagGaussianParams::new(vec![0.3, -0.2, 0.5], vec![-0.5, 0.1, -1.0]).unwrap(),
            mu: vec![vec![1.0, -0.5, 0.2], vec![-0.7, 0.4, 0.9]],
            nu: vec![vec![-0.3, 0.6, 0.0], vec![0.8, -0.9, -0.4]],
        }
    }

    pub fn kl_for(&self, row: &[f64]) -> f64 {
        let prior = prior_z_params(row, &self.mu, &self.nu, 1e-8).unwrap();
        gaussian_kl(&self.q, &prior)
    }

    /// Exact expectation over the four hard configurations of `A`.
    pub fn exact(&self) -> f64 {
        let k = KernelParams {
            log_tau: self.log_tau,
        };
        let p: Vec<f64> = (0..2)
            .map(|j| kernel_g(self.u_m.row(0), self.u_r.row(j), k))
            .collect();
        let mut total = 0.0;
        for a0 in [0.0, 1.0] {
            for a1 in [0.0, 1.0] {
                let w = (if a0 == 1.0 { p[0] } else { 1.0 - p[0] })
                    * (if a1 == 1.0 { p[1] } else { 1.0 - p[1] });
                total += w * self.kl_for(&[a0, a1]);
            }
        }
        total
    }

    /// Hard `A` draws through the sampler, one KL value per draw.
    pub fn monte_carlo(&self, draws: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng(seed);
        let cfg = ConcreteConfig::new(0.3).unwrap();
        (0..draws)
            .map(|_| {
                let noise = uniform_tensor(&mut rng, &[1, 2], 0.0, 1.0);
                let mut tape = Tape::new();
                let um = tape.constant(self.u_m.clone());
                let ur = tape.constant(self.u_r.clone());
                let lt = tape.constant(Tensor::matrix(1, 1, vec![self.log_tau]));
                let a = sample_bipartite_a(&mut tape, um, ur, lt, GraphMode::Hard, &noise, cfg)
                    .unwrap();
                self.kl_for(tape.value(a).row(0))
            })
            .collect()
    }
}

/// `KL(q‖p)` estimated from `draws` samples of `q`.
pub fn kl_monte_carlo(
    q: &DiagGaussianParams,
    p: &DiagGaussianParams,
    draws: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..draws)
        .map(|_| {
            let eps: Vec<f64> = (0..q.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let z = gaussian_sample(q, &eps).unwrap();
            gaussian_log_prob(&z, q) - gaussian_log_prob(&z, p)
        })
        .collect()
}
