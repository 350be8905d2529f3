use melemad::dataset::{apply_scaler, fit_scaler, synthesize, LabeledDataset, SyntheticSpec};
use melemad::maml::meta::episode_gradient;
use melemad::maml::mlp::{init_params, loss_and_gradient};
use melemad::maml::{
    inner_adapt, meta_evaluate, meta_gradient, meta_step, meta_train, sample_task, AdamState, Checkpoint, Episode,
    MamlConfig, MetaTrainer, ModelParams,
};
use proptest::prelude::*;

mod common;
use common::{central_differences, relative_error};

fn pool(n: usize, m: usize, seed: u64) -> LabeledDataset {
    let spec = SyntheticSpec { n, m, informative: m.min(2), noise_sigma: 0.2, class_balance: 0.5, seed };
    let ds = synthesize(&spec).unwrap().0;
    apply_scaler(&ds, &fit_scaler(&ds)).unwrap()
}

fn small_cfg() -> MamlConfig {
    MamlConfig {
        samples_per_task: 20,
        support_size: 10,
        query_size: 10,
        hidden_dims: vec![6, 4],
        tasks_per_meta_batch: 3,
        outer_iterations: 10,
        ..Default::default()
    }
}

/// Two inputs, one hidden layer of two units: nine parameters.
fn toy_cfg(alpha: f64, inner_steps: usize) -> MamlConfig {
    MamlConfig {
        alpha,
        inner_steps,
        first_order: false,
        hidden_dims: vec![2],
        dropout_rate: 0.0,
        samples_per_task: 16,
        support_size: 8,
        query_size: 8,
        ..Default::default()
    }
}

fn query_loss_after_adaptation(values: &[f64], theta: &ModelParams, ep: &Episode, cfg: &MamlConfig) -> f64 {
    let p = ModelParams::new(theta.architecture.clone(), values.to_vec()).unwrap();
    let adapted = inner_adapt(&p, &ep.support, cfg.alpha, cfg.inner_steps, ep.seed, true).unwrap();
    loss_and_gradient(&adapted, ep.query.features(), ep.query.labels(), None).unwrap().loss
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn second_order_gradient_matches_bilevel_differences(
        data_seed in 0u64..500, init_seed in any::<u64>(), task in any::<u64>(), alpha in 0.05f64..1.0, steps in 1usize..3,
    ) {
        let cfg = toy_cfg(alpha, steps);
        let pool = pool(80, 2, data_seed);
        let theta = init_params(&cfg.architecture(2).unwrap(), init_seed).unwrap();
        prop_assert!(theta.len() <= 10);
        let ep = sample_task(&pool, &cfg, task).unwrap();
        let analytic = episode_gradient(&theta, &ep, &cfg).unwrap().grad;
        let numeric = central_differences(|v| query_loss_after_adaptation(v, &theta, &ep, &cfg), &theta.values, 1e-5);
        // A network whose hidden units are all dead has no gradient to compare.
        prop_assume!(analytic.iter().any(|g| g.abs() > 1e-6));
        let err = relative_error(&analytic, &numeric);
        prop_assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn inner_step_descends_on_support(seed in any::<u64>(), task in any::<u64>()) {
        let cfg = MamlConfig { dropout_rate: 0.0, ..small_cfg() };
        let pool = pool(120, 4, 8);
        let theta = init_params(&cfg.architecture(4).unwrap(), seed).unwrap();
        let ep = sample_task(&pool, &cfg, task).unwrap();
        let before = loss_and_gradient(&theta, ep.support.features(), ep.support.labels(), None).unwrap();
        let adapted = inner_adapt(&theta, &ep.support, 1e-3, 1, ep.seed, false).unwrap();
        let after = loss_and_gradient(&adapted, ep.support.features(), ep.support.labels(), None).unwrap();
        prop_assert!(after.loss <= before.loss + 1e-15);
    }
}

#[test]
fn first_order_and_full_gradients_converge_as_alpha_shrinks() {
    let pool = pool(80, 2, 21);
    let arch = toy_cfg(0.0, 1).architecture(2).unwrap();
    let theta = init_params(&arch, 5).unwrap();
    let ep = sample_task(&pool, &toy_cfg(0.0, 1), 3).unwrap();
    let gaps: Vec<f64> = [1e-3, 1e-4, 1e-5]
        .iter()
        .map(|&alpha| {
            let full = episode_gradient(&theta, &ep, &toy_cfg(alpha, 1)).unwrap().grad;
            let fo = episode_gradient(&theta, &ep, &MamlConfig { first_order: true, ..toy_cfg(alpha, 1) }).unwrap().grad;
            diff_norm(&full, &fo)
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[0] > 0.0);
}

#[test]
fn zero_alpha_meta_gradient_is_mean_query_gradient() {
    let cfg = MamlConfig { alpha: 0.0, dropout_rate: 0.0, ..small_cfg() };
    let pool = pool(120, 4, 2);
    let theta = init_params(&cfg.architecture(4).unwrap(), 3).unwrap();
    let episodes: Vec<Episode> = (0..3).map(|t| sample_task(&pool, &cfg, 40 + t).unwrap()).collect();
    for first_order in [true, false] {
        let cfg = MamlConfig { first_order, ..cfg.clone() };
        let mg = meta_gradient(&theta, &episodes, &cfg).unwrap();
        let mut mean = vec![0.0; theta.len()];
        for ep in &episodes {
            let g = loss_and_gradient(&theta, ep.query.features(), ep.query.labels(), None).unwrap().grad;
            mean.iter_mut().zip(&g).for_each(|(m, gi)| *m += gi / 3.0);
        }
        assert!(diff_norm(&mg.grad, &mean) <= 1e-12, "first_order = {first_order}");
    }
}

#[test]
fn single_task_first_order_is_adapted_query_gradient() {
    let cfg = MamlConfig { alpha: 0.05, dropout_rate: 0.0, ..small_cfg() };
    let pool = pool(120, 4, 2);
    let theta = init_params(&cfg.architecture(4).unwrap(), 3).unwrap();
    let ep = sample_task(&pool, &cfg, 77).unwrap();
    let mg = meta_gradient(&theta, std::slice::from_ref(&ep), &cfg).unwrap();
    let adapted = inner_adapt(&theta, &ep.support, cfg.alpha, cfg.inner_steps, ep.seed, true).unwrap();
    let g = loss_and_gradient(&adapted, ep.query.features(), ep.query.labels(), None).unwrap().grad;
    assert_eq!(mg.grad, g);
}

#[test]
fn zero_beta_leaves_theta_unchanged_and_inputs_untouched() {
    let cfg = MamlConfig { beta: 0.0, ..small_cfg() };
    let pool = pool(120, 4, 2);
    let theta = init_params(&cfg.architecture(4).unwrap(), 3).unwrap();
    let adam = AdamState::new(theta.len());
    let (theta_copy, adam_copy) = (theta.clone(), adam.clone());
    let episodes: Vec<Episode> = (0..2).map(|t| sample_task(&pool, &cfg, t).unwrap()).collect();
    let out = meta_step(&theta, &episodes, &cfg, &adam).unwrap();
    assert_eq!(out.params, theta);
    assert_eq!(theta, theta_copy);
    assert_eq!(adam, adam_copy);

    let moved = meta_step(&theta, &episodes, &MamlConfig { beta: 1e-2, ..cfg }, &adam).unwrap();
    assert_ne!(moved.params, theta);
    assert_eq!(theta, theta_copy);
}

#[test]
fn meta_evaluate_leaves_theta_untouched_and_zero_model_gives_half() {
    let cfg = MamlConfig { alpha: 0.0, eval_episodes: 4, ..small_cfg() };
    let pool = pool(120, 4, 2);
    let theta = ModelParams::zeros(cfg.architecture(4).unwrap());
    let copy = theta.clone();
    let (probs, labels) = meta_evaluate(&theta, &pool, &cfg).unwrap();
    assert_eq!(theta, copy);
    assert_eq!(probs.len(), 4 * cfg.query_size);
    assert_eq!(labels.len(), probs.len());
    assert!(probs.iter().all(|&p| p == 0.5));
}

fn trained_bytes(threads: usize) -> (Vec<u8>, String) {
    let cfg = small_cfg();
    let pool = pool(200, 4, 6);
    let tp = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    tp.install(|| {
        let mut trainer = MetaTrainer::new(&pool, &cfg).unwrap();
        let log = trainer.run(&pool, &cfg, cfg.outer_iterations, |_, _| Ok(())).unwrap();
        let ck = Checkpoint { params: trainer.params, config: cfg.clone(), iteration: trainer.iteration, adam: Some(trainer.adam) };
        let losses: Vec<String> = log.entries.iter().map(|e| format!("{} {}", e.meta_loss, e.query_accuracy)).collect();
        (ck.encode().unwrap(), losses.join("\n"))
    })
}

#[test]
fn training_is_identical_across_thread_counts() {
    let one = trained_bytes(1);
    assert_eq!(one, trained_bytes(4));
    assert_eq!(one, trained_bytes(1));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let cfg = small_cfg();
    let pool = pool(200, 4, 6);
    let (full, _) = meta_train(&pool, &cfg).unwrap();
    let mut first = MetaTrainer::new(&pool, &cfg).unwrap();
    first.run(&pool, &cfg, 4, |_, _| Ok(())).unwrap();
    let ck = Checkpoint::decode(
        &Checkpoint { params: first.params.clone(), config: cfg.clone(), iteration: first.iteration, adam: Some(first.adam.clone()) }
            .encode()
            .unwrap(),
    )
    .unwrap();
    let mut second = MetaTrainer::resume(first.params, first.adam, ck.iteration);
    second.run(&pool, &cfg, 6, |_, _| Ok(())).unwrap();
    assert_eq!(second.params, full);
    assert_eq!(second.iteration, 10);
}

/// n = 4000 pool projected to 20 columns, one noiseless informative column.
fn separable_pool() -> LabeledDataset {
    let spec = SyntheticSpec { n: 4000, m: 20, informative: 1, noise_sigma: 0.0, class_balance: 0.5, seed: 11 };
    let ds = synthesize(&spec).unwrap().0;
    apply_scaler(&ds, &fit_scaler(&ds)).unwrap()
}

/// The meta-loss reaches 0.1 within 200 outer steps at an outer rate of
/// 1e-2. At 1e-3 it sits near 0.13 after 200 steps: too few Adam steps to
/// grow the logits that far.
#[test]
fn separable_pool_meta_loss_reaches_a_tenth() {
    let cfg = MamlConfig { outer_iterations: 200, beta: 1e-2, seed: 5, ..Default::default() };
    let (_, log) = meta_train(&separable_pool(), &cfg).unwrap();
    let losses = log.meta_losses();
    assert_eq!(losses.len(), 200);
    let first_below = losses.iter().position(|&l| l < 0.1);
    eprintln!("first meta-loss below 0.1 at iteration {first_below:?}, final {}", losses[199]);
    assert!(first_below.is_some());
}

#[test]
fn meta_loss_trends_down() {
    let cfg = MamlConfig { outer_iterations: 200, seed: 5, ..Default::default() };
    let (_, log) = meta_train(&separable_pool(), &cfg).unwrap();
    let median = |s: &[f64]| {
        let mut v = s.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let l = log.meta_losses();
    assert!(median(&l[180..]) < median(&l[..20]));
}
