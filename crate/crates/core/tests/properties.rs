mod common;

use common::*;
use fnproc::baselines::np::{NpConfig, NpModel};
use fnproc::baselines::{gp_regress, GpModel};
use fnproc::datasets::idx::{read_images, read_labels, write_images, write_labels, IdxImages};
use fnproc::datasets::{gen_toy1, gen_toy2, load_idx, PointSet, Split, Targets};
use fnproc::distributions::ConcreteConfig;
use fnproc::inference::{aucr, posterior_predictive};
use fnproc::model::{
    kernel_g, prior_z_params, sample_bipartite_a, sample_dag_g, GraphMode, KernelParams, TaskKind,
    Variant,
};
use fnproc::noise::NoiseBundle;
use fnproc::tensor::{Tape, Tensor};
use fnproc::training::{bound_gradients, elbo_batch, BoundSettings};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng(seed));
    p
}

fn permute_square(t: &Tensor, p: &[usize]) -> Tensor {
    let (rows, cols) = (t.rows(), t.cols());
    let data = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| t.row(p[i])[p[j]])
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn classification_sets(seed: u64, n_r: usize, n_m: usize) -> (PointSet, PointSet) {
    let mut g = rng(seed);
    let n = n_r + n_m;
    let x = normal_tensor(&mut g, n, 3);
    let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 4).collect();
    let all = PointSet::new(
        x,
        Targets::Classes {
            labels,
            num_classes: 4,
        },
        (0..n as u64).map(|i| i * 3 + 1).collect(),
    )
    .unwrap();
    let r: Vec<usize> = (0..n_r).collect();
    let m: Vec<usize> = (n_r..n).collect();
    (all.select(&r), all.select(&m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn primitive_gradients_match_finite_differences(op in 0..PRIMITIVES.len(), seed in any::<u64>()) {
        let err = primitive_gradient_error(PRIMITIVES[op], seed);
        prop_assert!(err < 1e-5, "{}: relative error {err:e}", PRIMITIVES[op]);
    }

    #[test]
    fn hard_dags_are_acyclic_and_antisymmetric(seed in any::<u64>()) {
        prop_assert!(dag_draw_ok(&draw_dag(seed, 50)));
    }

    #[test]
    fn kernel_is_symmetric(
        a in proptest::collection::vec(-5.0..5.0f64, 3),
        b in proptest::collection::vec(-5.0..5.0f64, 3),
        log_tau in -4.0..3.0f64,
    ) {
        let k = KernelParams { log_tau };
        prop_assert_eq!(kernel_g(&a, &b, k).to_bits(), kernel_g(&b, &a, k).to_bits());
    }

    #[test]
    fn zero_parents_give_the_standard_normal(
        codes in proptest::collection::vec(proptest::collection::vec(-4.0..4.0f64, 5), 1..8),
        epsilon in 1e-12..1.0f64,
    ) {
        let zeros = vec![0.0; codes.len()];
        let p = prior_z_params(&zeros, &codes, &codes, epsilon).unwrap();
        prop_assert!(p.mean().iter().all(|&v| v == 0.0));
        prop_assert!(p.logvar().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aucr_is_antisymmetric(
        inside in proptest::collection::vec(0.0..3.0f64, 1..30),
        outside in proptest::collection::vec(0.0..3.0f64, 1..30),
    ) {
        let mut all: Vec<f64> = inside.iter().chain(&outside).copied().collect();
        all.sort_by(f64::total_cmp);
        prop_assume!(all.windows(2).all(|w| w[0] != w[1]));
        let sum = aucr(&inside, &outside).unwrap() + aucr(&outside, &inside).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toy_generators_are_pure(seed in any::<u64>()) {
        prop_assert_eq!(gen_toy1(seed), gen_toy1(seed));
        prop_assert_eq!(gen_toy2(seed), gen_toy2(seed));
    }

    #[test]
    fn gp_variance_is_nonnegative(
        x in proptest::collection::vec(-2.0..2.0f64, 1..12),
        queries in proptest::collection::vec(-4.0..4.0f64, 1..12),
        log_lengthscale in -2.0..1.0f64,
        log_noise_var in -40.0..0.0f64,
    ) {
        let mut xs = x.clone();
        xs.extend_from_slice(&x[..x.len().min(3)]);
        let ys: Vec<f64> = xs.iter().map(|v| v.sin()).collect();
        let gp = GpModel { log_lengthscale, log_noise_var };
        for (_, var) in gp_regress(&xs, &ys, &queries, &gp).unwrap() {
            prop_assert!(var >= 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn composite_gradients_match_finite_differences(seed in any::<u64>()) {
        let err = composite_gradient_error(seed);
        prop_assert!(err < 1e-4, "relative error {err:e}");
    }

    #[test]
    fn graphs_are_permutation_equivariant(seed in any::<u64>(), n in 2usize..9) {
        let mut g = rng(seed);
        let u = normal_tensor(&mut g, n, 3);
        let noise = uniform_tensor(&mut g, &[n, n], 0.0, 1.0);
        let p = permutation(n, seed ^ 1);
        let u_perm = u.select_rows(&p);
        let cfg = ConcreteConfig::new(0.3).unwrap();
        for mode in [GraphMode::Hard, GraphMode::Relaxed] {
            let sample = |u: &Tensor, noise: &Tensor| {
                let mut tape = Tape::new();
                let uv = tape.constant(u.clone());
                let lt = tape.constant(Tensor::matrix(1, 1, vec![-0.5]));
                let gv = sample_dag_g(&mut tape, uv, lt, mode, noise, cfg).unwrap();
                let av = sample_bipartite_a(&mut tape, uv, uv, lt, mode, noise, cfg).unwrap();
                (tape.value(gv).clone(), tape.value(av).clone())
            };
            let (g0, a0) = sample(&u, &noise);
            let (g1, a1) = sample(&u_perm, &permute_square(&noise, &p));
            prop_assert_eq!(g1, permute_square(&g0, &p));
            prop_assert_eq!(a1, permute_square(&a0, &p));
        }
    }

    #[test]
    fn embeddings_are_permutation_equivariant(seed in any::<u64>(), n in 2usize..12) {
        let model = jittered_model(small_config(Variant::FnpPlus, TaskKind::Regression, 2), seed);
        let x = normal_tensor(&mut rng(seed), n, 2);
        let p = permutation(n, seed ^ 2);
        let plain = model.embed(&x).unwrap();
        let permuted = model.embed(&x.select_rows(&p)).unwrap();
        for (k, &i) in p.iter().enumerate() {
            prop_assert_eq!(&permuted[k], &plain[i]);
        }
    }

    #[test]
    fn bound_ignores_storage_order(seed in any::<u64>(), step in 0u64..1000) {
        let model = jittered_model(small_config(Variant::Fnp, TaskKind::Regression, 1), seed);
        let (r, m) = toy_sets(6, seed % 50);
        let noise = NoiseBundle::training(seed, step);
        let settings = BoundSettings { free_bits: 0.5, ..BoundSettings::default() };
        let base = elbo_batch(&model, &r, &m, m.len(), &noise, settings).unwrap();
        let r_perm = r.select(&permutation(r.len(), seed ^ 3));
        let m_perm = m.select(&permutation(m.len(), seed ^ 4));
        let moved = elbo_batch(&model, &r_perm, &m_perm, m.len(), &noise, settings).unwrap();
        prop_assert_eq!(base.total.to_bits(), moved.total.to_bits());
        prop_assert_eq!(base.objective.to_bits(), moved.objective.to_bits());
    }

    #[test]
    fn minibatch_average_equals_full_bound(seed in any::<u64>(), batch in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12])) {
        let model = jittered_model(small_config(Variant::FnpPlus, TaskKind::Classification { num_classes: 4 }, 3), seed);
        let (r, m) = classification_sets(seed, 5, 12);
        let noise = NoiseBundle::training(seed, 7);
        let settings = BoundSettings::default();
        let full = elbo_batch(&model, &r, &m, m.len(), &noise, settings).unwrap().total;
        let order = permutation(m.len(), seed ^ 5);
        let estimates: Vec<f64> = order
            .chunks(batch)
            .map(|rows| elbo_batch(&model, &r, &m.select(rows), m.len(), &noise, settings).unwrap().total)
            .collect();
        let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
        prop_assert!((mean - full).abs() <= 1e-9 * full.abs().max(1.0), "{mean} vs {full}");
    }

    #[test]
    fn clamped_kl_leaves_reconstruction_gradients(seed in any::<u64>()) {
        let model = jittered_model(small_config(Variant::Fnp, TaskKind::Regression, 1), seed);
        let (r, m) = toy_sets(5, seed % 50);
        let noise = NoiseBundle::training(seed, 0);
        let clamped = BoundSettings { free_bits: 1e6, ..BoundSettings::default() };
        let recon_only = BoundSettings { kl_weight: Some(0.0), ..BoundSettings::default() };
        let (_, g_clamped) = bound_gradients(&model, &r, &m, m.len(), &noise, clamped).unwrap();
        let (_, g_recon) = bound_gradients(&model, &r, &m, m.len(), &noise, recon_only).unwrap();
        for (a, b) in g_clamped.iter().zip(&g_recon) {
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0));
            }
        }
    }

    #[test]
    fn predictive_reads_only_the_reference_set_and_the_query(seed in any::<u64>(), extra in 0usize..6) {
        let model = jittered_model(small_config(Variant::FnpPlus, TaskKind::Classification { num_classes: 4 }, 3), seed);
        let (r, m) = classification_sets(seed, 6, 6);
        let alone = posterior_predictive(&model, &r, &m.inputs.select_rows(&[0]), &m.ids[..1], 8, seed).unwrap();
        let rows: Vec<usize> = (0..=extra).collect();
        let with_others = posterior_predictive(&model, &r, &m.inputs.select_rows(&rows), &m.ids[..=extra], 8, seed).unwrap();
        prop_assert_eq!(alone.probabilities(0), with_others.probabilities(0));
        let r_perm = r.select(&permutation(r.len(), seed ^ 6));
        let shuffled = posterior_predictive(&model, &r_perm, &m.inputs.select_rows(&[0]), &m.ids[..1], 8, seed).unwrap();
        prop_assert_eq!(alone.probabilities(0), shuffled.probabilities(0));
        let sum: f64 = with_others.probabilities(extra).unwrap().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn np_ignores_context_order_and_duplication(seed in any::<u64>(), n in 1usize..10) {
        let config = NpConfig {
            input_dim: 1,
            latent_dim: 4,
            task: TaskKind::Regression,
            torso_hidden: vec![8],
            head_hidden: vec![],
            max_context: 10,
        };
        let model = NpModel::new(config, seed).unwrap();
        let mut g = rng(seed);
        let x = uniform_tensor(&mut g, &[n, 1], -1.0, 1.0);
        let y = Targets::Values(uniform_tensor(&mut g, &[n], -1.0, 1.0).data().to_vec());
        let context = PointSet::new(x, y, (0..n as u64).collect()).unwrap();
        let queries = Tensor::column(vec![-0.5, 0.2, 1.5]);
        let base = model.predict(&context, &queries, 4, seed).unwrap();
        let shuffled = context.select(&permutation(n, seed ^ 7));
        prop_assert_eq!(&base, &model.predict(&shuffled, &queries, 4, seed).unwrap());
        let doubled: Vec<usize> = (0..n).chain(0..n).collect();
        prop_assert_eq!(&base, &model.predict(&context.select(&doubled), &queries, 4, seed).unwrap());
    }

    #[test]
    fn idx_files_round_trip(count in 1usize..6, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut g = rng(seed);
        let pixels: Vec<u8> = uniform_tensor(&mut g, &[count * rows * cols], 0.0, 256.0).data().iter().map(|&v| v as u8).collect();
        let labels: Vec<u8> = (0..count).map(|i| (i as u64 + seed) as u8 % 10).collect();
        let images = IdxImages { count, rows, cols, pixels };
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx.gz"), dir.path().join("lbl.idx"));
        write_images(&ip, &images).unwrap();
        write_labels(&lp, &labels).unwrap();
        prop_assert_eq!(&read_images(&ip).unwrap(), &images);
        prop_assert_eq!(&read_labels(&lp).unwrap(), &labels);
        let loaded = load_idx(&ip, &lp, Split::Test).unwrap();
        let expected: Vec<f64> = images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        prop_assert_eq!(loaded.inputs.data(), &expected[..]);
    }
}
