use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use dkl_core::data::{Era, ProcessedEpisode};
use dkl_core::gp::{
    gaussian_expected_log_lik, kl_whitened, predict_marginals, predictive_marginals, RbfKernelParams,
    VariationalState,
};
use dkl_core::metrics::MetricsOptions;
use dkl_core::params::ParamTree;
use dkl_core::tensor::{Tape, Tensor};
use dkl_core::train::{
    aggregate, batch_loss, evaluate_model, run_experiment, train_model, AdamState, Checkpoint, ExperimentData, MeanStd,
    ModelKind, ModelParams, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Episodes whose first column carries the label at every step.
fn separable(n: usize, seed: u64, prefix: &str) -> Vec<ProcessedEpisode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = u8::from(i % 3 == 0);
            let data = (0..6 * 5)
                .map(|k| {
                    let noise: f64 = rng.sample(StandardNormal);
                    if k % 5 == 0 { 2.0 * f64::from(label) - 1.0 + 0.3 * noise } else { noise }
                })
                .collect();
            ProcessedEpisode {
                id: format!("{prefix}{i}"),
                era: Era::A,
                label,
                x: Tensor::matrix(6, 5, data).unwrap(),
            }
        })
        .collect()
}

fn toy_config(model: ModelKind) -> TrainConfig {
    TrainConfig {
        model,
        learning_rate: 1e-2,
        epochs: 8,
        batch_size: 16,
        encoder_size: 4,
        hidden_size: 4,
        feature_dim: 3,
        num_inducing: 10,
        ..TrainConfig::default()
    }
}

fn fingerprint(p: &ModelParams) -> u64 {
    let mut h = DefaultHasher::new();
    p.visit(&mut |t| t.data().iter().for_each(|x| x.to_bits().hash(&mut h)));
    h.finish()
}

#[test]
fn separable_toy_is_learned_by_every_kind() {
    let (train, val) = (separable(120, 1, "t"), separable(60, 2, "v"));
    for model in ModelKind::ALL {
        let result = train_model(&toy_config(model), &train, &val).unwrap();
        assert!(result.best_val_auc > 0.95, "{model}: {}", result.best_val_auc);
        assert!((1..=8).contains(&result.best_epoch));
        let best = result.history.iter().map(|h| h.val_auc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best, result.best_val_auc);
        let first_best = result.history.iter().position(|h| h.val_auc == best).unwrap() + 1;
        assert_eq!(first_best, result.best_epoch, "ties go to the earlier epoch");
    }
}

#[test]
fn one_epoch_selects_epoch_one() {
    let (train, val) = (separable(40, 3, "t"), separable(20, 4, "v"));
    let cfg = TrainConfig { epochs: 1, ..toy_config(ModelKind::Dkl) };
    assert_eq!(train_model(&cfg, &train, &val).unwrap().best_epoch, 1);
}

#[test]
fn training_is_bit_reproducible() {
    let (train, val) = (separable(50, 5, "t"), separable(20, 6, "v"));
    for model in [ModelKind::BiLstm, ModelKind::Dkl] {
        let cfg = TrainConfig { epochs: 3, ..toy_config(model) };
        let a = train_model(&cfg, &train, &val).unwrap();
        let b = train_model(&cfg, &train, &val).unwrap();
        assert_eq!(a, b);
        let c = train_model(&TrainConfig { seed: 1, ..cfg }, &train, &val).unwrap();
        assert_ne!(a.checkpoint.params, c.checkpoint.params);
    }
}

#[test]
fn checkpoint_reload_reproduces_validation_auc() {
    let (train, val) = (separable(50, 7, "t"), separable(30, 8, "v"));
    let dir = tempfile::tempdir().unwrap();
    for model in [ModelKind::Lstm, ModelKind::DklLstm] {
        let cfg = TrainConfig { epochs: 3, ..toy_config(model) };
        let result = train_model(&cfg, &train, &val).unwrap();
        let path = dir.path().join(format!("{model}.json"));
        result.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, result.checkpoint);
        let refs: Vec<&ProcessedEpisode> = val.iter().collect();
        let before = fingerprint(&back.params);
        let (_, report) = evaluate_model(&back.params, &back.train, &refs, "validation", &MetricsOptions::default())
            .unwrap();
        assert_eq!(report.auc_roc, result.best_val_auc);
        assert_eq!(fingerprint(&back.params), before, "evaluation must not mutate parameters");
    }
}

#[test]
fn experiment_aggregates_match_per_run_rows() {
    let (train, val, test) = (separable(40, 9, "t"), separable(20, 10, "v"), separable(30, 11, "s"));
    let data = ExperimentData { train: &train, val: &val, test: &test };
    let template = TrainConfig { epochs: 2, ..toy_config(ModelKind::Dkl) };
    let kinds = [ModelKind::BiLstm, ModelKind::Dkl];
    let opts = MetricsOptions::default();
    let result = run_experiment(&template, &kinds, 3, 100, &data, &opts, 1, &|_| {}).unwrap();
    assert!(result.failures.is_empty());
    assert_eq!(result.runs.len(), 6);
    assert_eq!(result.aggregate, aggregate(&result.runs));
    for row in &result.aggregate {
        let aucs: Vec<f64> = result.runs.iter().filter(|r| r.model == row.model).map(|r| r.test.auc_roc).collect();
        let n = aucs.len() as f64;
        let mean = aucs.iter().sum::<f64>() / n;
        let std = (aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((row.test_auc_roc.mean - mean).abs() < 1e-15);
        assert!((row.test_auc_roc.std - std).abs() < 1e-15);
        assert!(!row.single_run);
    }
    for kind in kinds {
        let best = result.best_run(kind).unwrap();
        let max = result.runs.iter().filter(|r| r.model == kind).map(|r| r.best_val_auc).fold(0.0, f64::max);
        assert_eq!(best.best_val_auc, max);
    }
    // Seeds are seed0 + run, shared across model kinds.
    assert_eq!(result.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), [100, 101, 102, 100, 101, 102]);

    // Parallel execution gives the same records.
    let parallel = run_experiment(&template, &kinds, 3, 100, &data, &opts, 3, &|_| {}).unwrap();
    assert_eq!(parallel.runs, result.runs);

    let single = run_experiment(&template, &[ModelKind::Dkl], 1, 100, &data, &opts, 1, &|_| {}).unwrap();
    let row = &single.aggregate[0];
    assert!(row.single_run);
    assert_eq!(row.test_auc_roc.std, 0.0);
    assert_eq!(single.runs[0], result.runs[3], "identical seeds give identical rows");
    assert_eq!(MeanStd::of(&[single.runs[0].test.brier]).std, 0.0);
}

fn rbf(ell: f64, sf2: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    sf2 * (-0.5 * d2 / (ell * ell)).exp()
}

/// Dense Cholesky solve of a symmetric positive-definite system.
fn spd_solve(a: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            l[i * n + j] = if i == j { (a[i * n + i] - s).sqrt() } else { (a[i * n + j] - s) / l[j * n + j] };
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        y[i] = (y[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    for i in (0..n).rev() {
        y[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    y
}

#[test]
fn variational_regression_matches_exact_gp() {
    let start = Instant::now();
    let (n, d, noise) = (20, 2, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..n).map(|i| (1.5 * x[i * d]).sin() + 0.5 * x[i * d + 1] + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let kernel = RbfKernelParams {
        log_lengthscale: Tensor::scalar(0.8f64.ln()),
        log_outputscale: Tensor::scalar(0.0),
    };
    let features = Tensor::matrix(n, d, x.clone()).unwrap();

    // Exact posterior mean K (K + s²I)⁻¹ y at the training inputs.
    let k: Vec<f64> = (0..n * n).map(|ij| rbf(0.8, 1.0, &x[ij / n * d..][..d], &x[ij % n * d..][..d])).collect();
    let mut ks = k.clone();
    (0..n).for_each(|i| ks[i * n + i] += noise);
    let alpha = spd_solve(&ks, n, &y);
    let exact: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i * n + j] * alpha[j]).sum()).collect();

    let mut state = vec![Tensor::zeros(&[n, 1]), Tensor::zeros(&[n, n])];
    let mut adam = AdamState::new(&state);
    let steps = 6000;
    for step in 0..steps {
        let tape = Tape::new();
        let mean = tape.param(state[0].clone());
        let chol_raw = tape.param(state[1].clone());
        let s = dkl_core::gp::Variational { inducing: tape.constant(features.clone()), mean, chol_raw };
        let kv = kernel.map(&mut |t| tape.constant(t.clone()));
        let pred = predictive_marginals(&kv, &s, tape.constant(features.clone())).unwrap();
        let bound = gaussian_expected_log_lik(&pred, &y, noise).unwrap().sub(kl_whitened(&s).unwrap()).unwrap();
        let loss = bound.scale(-1.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = vec![grads.wrt(mean), grads.wrt(chol_raw)];
        let lr = 0.05 * (1.0 - step as f64 / steps as f64) + 1e-4;
        adam.step(&mut state, &g, lr).unwrap();
    }
    let fitted = VariationalState { inducing: features.clone(), mean: state[0].clone(), chol_raw: state[1].clone() };
    let pred = predict_marginals(&kernel, &fitted, &features).unwrap();
    let err = pred.mean.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-4, "max |μ − exact| = {err:e}");
    assert!(start.elapsed().as_secs_f64() < 5.0, "took {:?}", start.elapsed());
}

/// Full DKL minibatch loss on a toy: 4 instances of 4 steps, 5 inducing
/// points, every parameter leaf perturbed jointly.
#[test]
fn dkl_minibatch_loss_passes_finite_differences() {
    let start = Instant::now();
    let episodes = separable(4, 7, "g");
    let episodes: Vec<ProcessedEpisode> = episodes
        .into_iter()
        .map(|mut e| {
            e.x = Tensor::matrix(4, 5, e.x.data()[..20].to_vec()).unwrap();
            e
        })
        .collect();
    let cfg = TrainConfig { num_inducing: 5, encoder_size: 3, hidden_size: 3, feature_dim: 2, ..toy_config(ModelKind::Dkl) };
    let xs: Vec<&Tensor> = episodes.iter().map(|e| &e.x).collect();
    let params = dkl_core::train::init_model(&cfg, &xs, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mask = dkl_core::nn::dropout_mask(0.3, &[4 * 4, cfg.encoder_size], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let rule = dkl_core::quadrature::GaussHermite::new(cfg.quadrature_nodes).unwrap();
    let batch: Vec<&ProcessedEpisode> = episodes.iter().collect();
    let mut leaves = Vec::new();
    params.visit(&mut |t| leaves.push(t.clone()));
    let err = dkl_core::tensor::finite_diff_check_many(
        |tape, vars| {
            let mut i = 0;
            let model = params.map(&mut |_| {
                i += 1;
                vars[i - 1]
            });
            batch_loss(tape, &model, &batch, Some(&mask), 40, Some(&rule)).map_err(|e| match e {
                dkl_core::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        },
        &leaves,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err:e}");
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}
