use super::*;
use proptest::prelude::*;
use rand::Rng;

fn set(store: &ParameterStore, name: &str, values: Vec<f64>) -> ParameterStore {
    let entries = store
        .entries()
        .iter()
        .map(|e| {
            if e.name() == name {
                TensorEntry::new(name, e.shape().to_vec(), values.clone()).unwrap()
            } else {
                e.clone()
            }
        })
        .collect();
    ParameterStore::new(entries).unwrap()
}

fn fill(store: &ParameterStore, name: &str, v: f64) -> ParameterStore {
    let n = store.entry(name).unwrap().len();
    set(store, name, vec![v; n])
}

fn random_samples(cfg: &NetworkConfig, n: usize, seed: u64, masks: &[[bool; 3]]) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let x = ModalityId::ALL.map(|m| (0..cfg.dim(m)).map(|_| rng.random_range(-1.0..1.0)).collect());
            let y = match cfg.task {
                TaskKind::Regression => rng.random_range(-1.0..1.0),
                TaskKind::Classification => rng.random_range(0..cfg.classes) as f64,
            };
            Sample::new(x, masks[i % masks.len()], y)
        })
        .collect()
}

const ALL: [[bool; 3]; 1] = [[true; 3]];
const MIXED: [[bool; 3]; 4] = [
    [true, true, true],
    [true, false, true],
    [false, true, true],
    [true, true, false],
];

fn unit_cfg() -> NetworkConfig {
    NetworkConfig {
        d_l: 1,
        d_a: 1,
        d_v: 1,
        d_p: 1,
        hidden_decomp: 1,
        hidden_gen: 1,
        hidden_bt: 1,
        hidden_fusion: 1,
        fused_dim: 1,
        hidden_head: 1,
        task: TaskKind::Regression,
        classes: 2,
    }
}

/// Central-difference derivative of `f` at every coordinate of `store`.
fn numeric_grad(store: &ParameterStore, h: f64, f: impl Fn(&ParameterStore) -> f64) -> Vec<f64> {
    let base = store.to_flat();
    (0..base.len())
        .map(|i| {
            let plus = store.apply_flat_updates(&[(i, base[i] + h)]).unwrap();
            let minus = store.apply_flat_updates(&[(i, base[i] - h)]).unwrap();
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], n: &[f64]) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for (i, (&x, &y)) in a.iter().zip(n).enumerate() {
        let d = (x - y).abs();
        let e = if d <= 1e-8 { 0.0 } else { d / x.abs().max(y.abs()) };
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

#[test]
fn zero_store_decomposes_to_zero() {
    let bb = Backbone::new(NetworkConfig::desk()).unwrap();
    let store = bb.zero_store().unwrap();
    let d = bb.decompose(&store, &[0.7; 32], ModalityId::L).unwrap();
    assert!(d.sigma.iter().chain(&d.mu).all(|&v| v == 0.0));
    assert_eq!(d.sigma.len(), 8);
    assert!(bb.decompose(&store, &[0.0; 31], ModalityId::L).is_err());
}

#[test]
fn decompose_is_deterministic_and_batch_equivalent() {
    let cfg = NetworkConfig::desk();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(3).unwrap();
    let samples = random_samples(&cfg, 5, 9, &ALL);
    let a = bb
        .decompose(&store, samples[0].features(ModalityId::A), ModalityId::A)
        .unwrap();
    let b = bb
        .decompose(&store, samples[0].features(ModalityId::A), ModalityId::A)
        .unwrap();
    assert_eq!(a, b);
    let batch = bb.batch(&samples).unwrap();
    let (sig, mu) = bb.decompose_batch(&store, &batch.x[1], ModalityId::A).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let d = bb.decompose(&store, s.features(ModalityId::A), ModalityId::A).unwrap();
        for j in 0..cfg.d_p {
            assert!((sig[[i, j]] - d.sigma[j]).abs() < 1e-14);
            assert!((mu[[i, j]] - d.mu[j]).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_generator_gives_mean_squared_norm() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let mut store = bb.init_store(1).unwrap();
    store = fill(&store, "gen.V.out.w", 0.0);
    let samples = random_samples(&cfg, 6, 2, &MIXED);
    let batch = bb.batch(&samples).unwrap();
    let obs: Vec<_> = samples.iter().filter(|s| s.is_present(ModalityId::V)).collect();
    let want = obs
        .iter()
        .map(|s| s.features(ModalityId::V).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / obs.len() as f64;
    assert!((bb.loss_re(&store, &batch, ModalityId::V).unwrap() - want).abs() < 1e-14);
    for s in &samples {
        assert_eq!(bb.generate(&store, s, ModalityId::V).unwrap(), vec![0.0; 3]);
        assert_eq!(bb.generate(&store, s, ModalityId::L).unwrap().len(), cfg.d_l);
    }
}

#[test]
fn loss_re_matches_per_sample_sum() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(5).unwrap();
    let samples = random_samples(&cfg, 8, 6, &MIXED);
    let batch = bb.batch(&samples).unwrap();
    for m in ModalityId::ALL {
        let mut sum = 0.0;
        let mut n = 0;
        for s in samples.iter().filter(|s| s.is_present(m)) {
            let g = bb.generate(&store, s, m).unwrap();
            sum += g.iter().zip(s.features(m)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n += 1;
        }
        let got = bb.loss_re(&store, &batch, m).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12, "{m}: {got} vs {}", sum / n as f64);
    }
}

#[test]
fn perfect_reconstruction_has_zero_re() {
    let cfg = unit_cfg();
    let bb = Backbone::new(cfg).unwrap();
    // constant target 0.5 reproduced by the bias of the output layer
    let store = fill(&bb.zero_store().unwrap(), "gen.L.out.b", 0.5);
    let s = Sample::new([vec![0.5], vec![0.3], vec![-0.2]], [true; 3], 0.0);
    let batch = bb.batch(&[s.clone(), s]).unwrap();
    assert_eq!(bb.loss_re(&store, &batch, ModalityId::L).unwrap(), 0.0);
}

#[test]
fn unit_network_hand_values() {
    let bb = Backbone::new(unit_cfg()).unwrap();
    let mut store = bb.zero_store().unwrap();
    for name in [
        "fusion.hidden.w",
        "fusion.out.w",
        "head.hidden.w",
        "head.out.w",
        "bt.L.hidden.w",
        "bt.L.out.w",
    ] {
        store = fill(&store, name, 1.0);
    }
    let z = bb.fuse(&store, [&[0.1], &[0.2], &[0.3]]).unwrap();
    assert!((z[0] - 0.537_049_566_998_035_3).abs() < 1e-15);
    let y = bb.predict(&store, &z).unwrap();
    assert!((y[0] - 0.490_751_351_728_970_94).abs() < 1e-15);
    let xb = bb.back_translate(&store, &z, ModalityId::L).unwrap();
    assert_eq!(xb, y);
}

#[test]
fn fuse_depends_on_modality_order() {
    let mut cfg = NetworkConfig::tiny();
    cfg.d_v = cfg.d_a;
    let bb = Backbone::new(cfg).unwrap();
    let store = bb.init_store(11).unwrap();
    let (l, a, v) = ([0.1, 0.2, 0.3, 0.4], [0.5, -0.3, 0.2], [-0.7, 0.1, 0.9]);
    let z1 = bb.fuse(&store, [&l, &a, &v]).unwrap();
    let z2 = bb.fuse(&store, [&l, &v, &a]).unwrap();
    assert_ne!(z1, z2);
}

#[test]
fn zero_head_predicts_zero() {
    let bb = Backbone::new(NetworkConfig::tiny()).unwrap();
    let store = fill(&bb.zero_store().unwrap(), "head.hidden.w", 0.4);
    assert_eq!(bb.predict(&store, &[0.0; 3]).unwrap(), vec![0.0]);
}

#[test]
fn task_loss_edge_values() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = fill(&bb.zero_store().unwrap(), "head.out.b", 0.25);
    let samples: Vec<_> = random_samples(&cfg, 4, 1, &ALL)
        .into_iter()
        .map(|mut s| {
            s.y = 0.25;
            s
        })
        .collect();
    assert_eq!(bb.loss_task(&store, &bb.batch(&samples).unwrap()).unwrap(), 0.0);
    assert!(matches!(
        bb.batch(&[]).and_then(|b| bb.loss_task(&store, &b)),
        Err(MbdError::EmptyBatch(_))
    ));

    let mut ccfg = cfg;
    ccfg.task = TaskKind::Classification;
    let cb = Backbone::new(ccfg.clone()).unwrap();
    let zs = cb.zero_store().unwrap();
    let batch = cb.batch(&random_samples(&ccfg, 5, 2, &MIXED)).unwrap();
    assert!((cb.loss_task(&zs, &batch).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn task_loss_matches_scalar_recomputation() {
    for task in [TaskKind::Regression, TaskKind::Classification] {
        let mut cfg = NetworkConfig::tiny();
        cfg.task = task;
        let bb = Backbone::new(cfg.clone()).unwrap();
        let store = bb.init_store(21).unwrap();
        let samples = random_samples(&cfg, 7, 4, &MIXED);
        let mut total = 0.0;
        for s in &samples {
            let filled: Vec<Vec<f64>> = ModalityId::ALL
                .iter()
                .map(|&m| {
                    if s.is_present(m) {
                        s.features(m).to_vec()
                    } else {
                        bb.generate(&store, s, m).unwrap()
                    }
                })
                .collect();
            let z = bb.fuse(&store, [&filled[0], &filled[1], &filled[2]]).unwrap();
            let out = bb.predict(&store, &z).unwrap();
            total += match task {
                TaskKind::Regression => (out[0] - s.y).powi(2),
                TaskKind::Classification => {
                    let denom: f64 = out.iter().map(|v| v.exp()).sum();
                    -(out[s.y as usize].exp() / denom).ln()
                }
            };
        }
        let got = bb.loss_task(&store, &bb.batch(&samples).unwrap()).unwrap();
        assert!((got - total / 7.0).abs() < 1e-12, "{task:?}");
    }
}

#[test]
fn contrastive_uniform_logits_give_ln_n() {
    let bb = Backbone::new(NetworkConfig::tiny()).unwrap();
    let store = bb.zero_store().unwrap();
    for n in 2..6 {
        let batch = bb.batch(&random_samples(bb.config(), n, n as u64, &ALL)).unwrap();
        let con = bb.loss_con(&store, &batch, ModalityId::L).unwrap();
        assert!((con - (n as f64).ln()).abs() < 1e-14);
    }
    // orthogonal nonzero vectors, equal norms
    let xb = Array2::from_shape_vec((3, 4), vec![1., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0., 0.]).unwrap();
    let sg = Array2::from_shape_vec((3, 4), vec![0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 1., 0.]).unwrap();
    let con = objective::contrastive(&xb, &sg, &[0, 1, 2], 0.1, 0.0, None);
    assert!((con - 3f64.ln()).abs() < 1e-15);
}

#[test]
fn contrastive_rejects_single_sample() {
    let bb = Backbone::new(NetworkConfig::tiny()).unwrap();
    let store = bb.init_store(0).unwrap();
    let batch = bb.batch(&random_samples(bb.config(), 1, 0, &ALL)).unwrap();
    assert!(bb.loss_con(&store, &batch, ModalityId::L).is_err());
}

#[test]
fn contrastive_matches_hand_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let xb = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
    let sg = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
    let tau = 0.1;
    let mut want = 0.0;
    for i in 0..3 {
        let logit = |j: usize| -> f64 { (xb[[i, 0]] * sg[[j, 0]] + xb[[i, 1]] * sg[[j, 1]]) / tau };
        let denom: f64 = (0..3).map(|j| logit(j).exp()).sum();
        want -= (logit(i).exp() / denom).ln();
    }
    want /= 3.0;
    let got = objective::contrastive(&xb, &sg, &[0, 1, 2], tau, 0.0, None);
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn property_terms_edge_cases() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let w = LossWeights::default();
    let batch = bb.batch(&random_samples(&cfg, 5, 8, &ALL)).unwrap();

    // μ constant (bias only), Σ zero: inv = 0, or = 0
    let mut store = bb.init_store(4).unwrap();
    store = fill(&store, "de.L.mu.w", 0.0);
    store = set(&store, "de.L.mu.b", vec![0.3, -0.1]);
    store = fill(&store, "de.L.sigma.w", 0.0);
    let pe = bb.loss_pe(&store, &batch, ModalityId::L, &w).unwrap();
    assert_eq!(pe.inv, 0.0);
    assert_eq!(pe.or, 0.0);

    // P within margin of μ̄: hinge inactive
    store = set(&store, "prop.L", vec![0.35, -0.1]);
    let pe = bb.loss_pe(&store, &batch, ModalityId::L, &w).unwrap();
    assert_eq!(pe.app, 0.0);
    store = set(&store, "prop.L", vec![0.5, -0.1]);
    let pe = bb.loss_pe(&store, &batch, ModalityId::L, &w).unwrap();
    assert!((pe.app - (0.04 - 0.01)).abs() < 1e-15);
    assert!((pe.pe - (pe.or + pe.inv + pe.re_decomp + pe.app)).abs() < 1e-15);

    // Σ ⟂ μ with both nonzero
    store = set(&store, "de.L.sigma.b", vec![0.1, 0.3]);
    let pe = bb.loss_pe(&store, &batch, ModalityId::L, &w).unwrap();
    assert!(pe.or.abs() < 1e-15);
}

#[test]
fn zero_weights_reduce_total_to_task() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(2).unwrap();
    let batch = bb.batch(&random_samples(&cfg, 6, 3, &ALL)).unwrap();
    let w = LossWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..LossWeights::default()
    };
    let (b, g) = bb.grad(&store, &batch, &w).unwrap();
    assert_eq!(b.total, b.task);
    for (i, &v) in g.iter().enumerate() {
        let name = store.flatten(i).unwrap().entry_name;
        if !(name.starts_with("fusion.") || name.starts_with("head.")) {
            assert_eq!(v, 0.0, "{name}");
        }
    }
    assert!(g.iter().any(|&v| v != 0.0));
}

#[test]
fn doubling_alpha_doubles_re_contribution() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(2).unwrap();
    let batch = bb.batch(&random_samples(&cfg, 6, 3, &MIXED)).unwrap();
    let w1 = LossWeights::default();
    let w2 = LossWeights {
        alpha: 2.0 * w1.alpha,
        ..w1
    };
    let a = bb.total_loss(&store, &batch, &w1).unwrap();
    let b = bb.total_loss(&store, &batch, &w2).unwrap();
    assert_eq!(a.re, b.re);
    assert!(((b.total - a.total) - a.alpha * a.re).abs() < 1e-14);
}

#[test]
fn gradient_matches_finite_differences() {
    let cases = [
        (TaskKind::Regression, OrthoForm::Squared),
        (TaskKind::Classification, OrthoForm::Squared),
        (TaskKind::Regression, OrthoForm::Raw),
    ];
    for (task, or_form) in cases {
        let mut cfg = NetworkConfig::tiny();
        cfg.task = task;
        assert!(cfg.param_count() <= 2000);
        let bb = Backbone::new(cfg.clone()).unwrap();
        let store = bb.init_store(13).unwrap();
        let batch = bb.batch(&random_samples(&cfg, 6, 14, &MIXED)).unwrap();
        let w = LossWeights {
            tau: 1.0,
            or_form,
            ..LossWeights::default()
        };
        let (_, g) = bb.grad(&store, &batch, &w).unwrap();
        let n = numeric_grad(&store, 1e-5, |s| bb.total_loss(s, &batch, &w).unwrap().total);
        let (err, at) = max_rel_err(&g, &n);
        assert!(
            err < 1e-5,
            "{task:?}/{or_form:?}: rel err {err} at {}",
            store.flatten(at).unwrap().entry_name
        );
    }
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(17).unwrap();
    let batch = bb.batch(&random_samples(&cfg, 5, 18, &MIXED)).unwrap();
    let w = LossWeights::default();
    for m in ModalityId::ALL {
        let (_, g) = bb
            .objective_grad(&store, &batch, &w, &TermCoefficients::recon(m))
            .unwrap();
        let n = numeric_grad(&store, 1e-5, |s| bb.loss_re(s, &batch, m).unwrap());
        assert!(max_rel_err(&g, &n).0 < 1e-5);
        let gen = format!("gen.{m}.");
        assert!(g.iter().enumerate().all(|(i, &v)| {
            let name = store.flatten(i).unwrap().entry_name;
            v == 0.0 || name.starts_with(&gen) || name == format!("prop.{m}")
        }));
    }
}

#[test]
fn absent_features_do_not_affect_loss() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(8).unwrap();
    let batch = bb.batch(&random_samples(&cfg, 8, 9, &MIXED)).unwrap();
    let mut noisy = batch.clone();
    for k in 0..3 {
        for i in 0..noisy.len() {
            if !noisy.mask[k][i] {
                noisy.x[k].row_mut(i).fill(123.0 + i as f64);
            }
        }
    }
    let w = LossWeights::default();
    let (a, ga) = bb.grad(&store, &batch, &w).unwrap();
    let (b, gb) = bb.grad(&store, &noisy, &w).unwrap();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

#[test]
fn task_and_re_are_means_of_single_samples() {
    let cfg = NetworkConfig::tiny();
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(8).unwrap();
    let samples = random_samples(&cfg, 6, 10, &ALL);
    let w = LossWeights::default();
    let whole = bb.total_loss(&store, &bb.batch(&samples).unwrap(), &w).unwrap();
    let singles: Vec<_> = samples
        .iter()
        .map(|s| {
            bb.total_loss(&store, &bb.batch(std::slice::from_ref(s)).unwrap(), &w)
                .unwrap()
        })
        .collect();
    let mean = |f: fn(&LossBreakdown) -> f64| singles.iter().map(f).sum::<f64>() / singles.len() as f64;
    assert!((whole.task - mean(|b| b.task)).abs() < 1e-12);
    assert!((whole.re - mean(|b| b.re)).abs() < 1e-12);
}

#[test]
fn store_shape_mismatch_is_rejected() {
    let bb = Backbone::new(NetworkConfig::tiny()).unwrap();
    let other = Backbone::new(unit_cfg()).unwrap().zero_store().unwrap();
    let batch = bb.batch(&random_samples(bb.config(), 2, 0, &ALL)).unwrap();
    assert!(bb.forward(&other, &batch).is_err());
}

#[test]
fn init_is_seeded() {
    let bb = Backbone::new(NetworkConfig::desk()).unwrap();
    assert!(bb.init_store(5).unwrap().bit_eq(&bb.init_store(5).unwrap()));
    assert!(!bb.init_store(5).unwrap().bit_eq(&bb.init_store(6).unwrap()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn loss_terms_non_negative(seed in 0u64..1000, data in 0u64..1000, n in 1usize..6) {
        let cfg = NetworkConfig::tiny();
        let bb = Backbone::new(cfg.clone()).unwrap();
        let store = bb.init_store(seed).unwrap();
        let batch = bb.batch(&random_samples(&cfg, n, data, &MIXED)).unwrap();
        let b = bb.total_loss(&store, &batch, &LossWeights::default()).unwrap();
        prop_assert!(b.re >= 0.0 && b.inv >= 0.0 && b.app >= 0.0 && b.con >= 0.0 && b.task >= 0.0);
        let pe = b.or + b.inv + b.re_decomp + b.app;
        prop_assert!((b.pe - pe).abs() <= 1e-12 * pe.abs().max(1.0));
        let total = b.task + b.alpha * b.re + b.beta * b.pe + b.gamma * b.con;
        prop_assert!((b.total - total).abs() <= 1e-12 * total.abs().max(1.0));
    }
}

#[test]
fn output_grad_matches_finite_differences() {
    let mut cfg = NetworkConfig::tiny();
    cfg.task = TaskKind::Classification;
    let bb = Backbone::new(cfg.clone()).unwrap();
    let store = bb.init_store(4).unwrap();
    let batch = bb.batch(&random_samples(&cfg, 1, 4, &MIXED)).unwrap();
    for j in 0..2 {
        let g = bb.output_grad(&store, &batch, j).unwrap();
        let n = numeric_grad(&store, 1e-5, |s| bb.forward(s, &batch).unwrap().out[[0, j]]);
        assert!(max_rel_err(&g, &n).0 < 1e-5);
    }
    assert!(bb.output_grad(&store, &batch, 2).is_err());
}
