mod common;

use common::*;
use fmaml_core::episodes::{EpisodeSpec, EpisodeItem};
use fmaml_core::meta::*;
use fmaml_core::model::{forward, BnMode, Model, ModelConfig, HEAD_BIAS, HEAD_WEIGHT};
use fmaml_core::tensor::{backward, cross_entropy, finite_diff_grad, relative_error, sgd_step, Graph, ParamSet, Tensor};
use fmaml_core::Error;

const CAP: usize = 20_000;

fn start(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let p = Model::init(cfg.clone(), seed).unwrap().params;
    jitter(&p, &mut rng(seed ^ 0xabc), 0.1)
}

/// `L_Q(θ − α∇L_S(θ))` after `steps` inner steps.
fn bilevel_loss(cfg: &ModelConfig, p: &ParamSet, s: &[EpisodeItem], q: &[EpisodeItem], alpha: f64, steps: usize, frozen: Option<usize>) -> fmaml_core::Result<f64> {
    Ok(meta_gradient(cfg, p, s, q, alpha, steps, GradMode::FirstOrder, frozen, CAP)?.query_loss)
}

fn assert_close(got: &ParamSet, want: &ParamSet, tol: f64) {
    let mut worst = 0.0f64;
    for ((name, a), (_, b)) in got.iter().zip(want.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let e = relative_error(*x, *y, 1e-6);
            assert!(e < tol, "{name}: {x} vs {y} (rel {e})");
            worst = worst.max(e);
        }
    }
    assert!(worst.is_finite());
}

fn fixture(cfg: &ModelConfig, seed: u64) -> (ParamSet, Vec<EpisodeItem>, Vec<EpisodeItem>) {
    let mut r = rng(seed);
    let s = random_items(&mut r, cfg, 2, 0);
    let q = random_items(&mut r, cfg, 2, 100);
    (start(cfg, seed), s, q)
}

#[test]
fn second_order_matches_bilevel_finite_differences() {
    let cfg = two_layer_config(3);
    assert!(cfg.param_count() <= 500);
    for seed in 0..5 {
        let (theta, s, q) = fixture(&cfg, seed);
        let mg = meta_gradient(&cfg, &theta, &s, &q, 0.1, 1, GradMode::SecondOrder, None, CAP).unwrap();
        let fd = finite_diff_grad(|p| bilevel_loss(&cfg, p, &s, &q, 0.1, 1, None), &theta, 1e-5).unwrap();
        assert_close(&mg.grads, &fd, 1e-3);
    }
}

#[test]
fn second_order_with_frozen_head_rows_matches_finite_differences() {
    let cfg = two_layer_config(4);
    let (theta, s, q) = fixture(&cfg, 7);
    let mg = meta_gradient(&cfg, &theta, &s, &q, 0.1, 2, GradMode::SecondOrder, Some(2), CAP).unwrap();
    let fd = finite_diff_grad(|p| bilevel_loss(&cfg, p, &s, &q, 0.1, 2, Some(2)), &theta, 1e-5).unwrap();
    assert_close(&mg.grads, &fd, 1e-3);
}

#[test]
fn first_order_differs_from_second_order_in_general() {
    let cfg = two_layer_config(3);
    let (theta, s, q) = fixture(&cfg, 3);
    let a = meta_gradient(&cfg, &theta, &s, &q, 0.1, 1, GradMode::FirstOrder, None, CAP).unwrap();
    let b = meta_gradient(&cfg, &theta, &s, &q, 0.1, 1, GradMode::SecondOrder, None, CAP).unwrap();
    assert_eq!(a.query_loss, b.query_loss);
    assert_ne!(a.grads, b.grads);
}

#[test]
fn gradient_modes_agree_exactly_when_adaptation_is_trivial() {
    let cfg = two_layer_config(3);
    let (theta, s, q) = fixture(&cfg, 11);
    for (alpha, steps) in [(0.0, 3), (0.1, 0)] {
        let a = meta_gradient(&cfg, &theta, &s, &q, alpha, steps, GradMode::FirstOrder, None, CAP).unwrap();
        let b = meta_gradient(&cfg, &theta, &s, &q, alpha, steps, GradMode::SecondOrder, None, CAP).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.query_loss.to_bits(), b.query_loss.to_bits());
        assert_eq!(inner_adapt(&cfg, &theta, &s, alpha, steps).unwrap(), theta);
    }
}

#[test]
fn second_order_respects_parameter_cap() {
    let cfg = two_layer_config(3);
    let (theta, s, q) = fixture(&cfg, 1);
    let err = meta_gradient(&cfg, &theta, &s, &q, 0.1, 1, GradMode::SecondOrder, None, 10).unwrap_err();
    assert!(matches!(err, Error::SecondOrderCap { cap: 10, .. }));
}

#[test]
fn one_inner_step_is_manual_sgd_composition() {
    let cfg = tiny_config(4);
    let mut r = rng(5);
    let theta = start(&cfg, 5);
    let support = random_items(&mut r, &cfg, 3, 0);
    let (x, y) = batch(&support, 4).unwrap();
    let mut g = Graph::new();
    let bound = theta.bind(&mut g);
    let xv = g.constant(x);
    let out = forward(&mut g, &cfg, &bound, xv, BnMode::Batch).unwrap();
    let loss = cross_entropy(&mut g, out.logits, &y).unwrap();
    let grads = backward(&mut g, loss, &bound).unwrap();
    let manual = sgd_step(&theta, &grads, 0.1).unwrap();
    let before = theta.clone();
    assert_eq!(inner_adapt(&cfg, &theta, &support, 0.1, 1).unwrap(), manual);
    assert_eq!(theta, before);
    assert!(inner_adapt(&cfg, &theta, &[], 0.1, 1).is_err());
}

fn maml_cfg(beta: f64, inner_steps: usize, mode: GradMode) -> TrainConfig {
    TrainConfig { alpha: 0.1, beta, inner_steps, grad_mode: mode, variant: Variant::Maml, meta_batch: 2, ..TrainConfig::default() }
}

fn spec_for(classes: usize) -> EpisodeSpec {
    EpisodeSpec { n_new: classes, n_fixed: 0, ..EpisodeSpec::default() }
}

#[test]
fn meta_step_without_inner_steps_is_plain_sgd_on_query() {
    let cfg = two_layer_config(3);
    let (theta, s, q) = fixture(&cfg, 21);
    let model = Model::init(cfg.clone(), 0).unwrap().with_params(theta.clone());
    for mode in [GradMode::FirstOrder, GradMode::SecondOrder] {
        let tc = maml_cfg(0.05, 0, mode);
        let (next, stats) = meta_step(&model, &[episode(0, s.clone(), q.clone(), 3)], &tc, &spec_for(3)).unwrap();
        let (x, y) = batch(&q, 3).unwrap();
        let mut g = Graph::new();
        let bound = theta.bind(&mut g);
        let xv = g.constant(x);
        let out = forward(&mut g, &cfg, &bound, xv, BnMode::Batch).unwrap();
        let loss = cross_entropy(&mut g, out.logits, &y).unwrap();
        let want_loss = g.value(loss).unwrap().item().unwrap();
        let grads = backward(&mut g, loss, &bound).unwrap();
        assert_eq!(next.params, sgd_step(&theta, &grads, 0.05).unwrap());
        assert_eq!(stats.meta_loss, want_loss);
    }
}

#[test]
fn duplicated_and_permuted_tasks_leave_update_unchanged() {
    let cfg = two_layer_config(3);
    let model = Model::init(cfg.clone(), 4).unwrap();
    let tc = maml_cfg(0.05, 2, GradMode::FirstOrder);
    let spec = spec_for(3);
    let mut r = rng(8);
    let tasks: Vec<_> = (0..3)
        .map(|i| episode(i, random_items(&mut r, &cfg, 2, 100 * i as usize), random_items(&mut r, &cfg, 2, 100 * i as usize + 50), 3))
        .collect();
    let (once, _) = meta_step(&model, &tasks[..1], &tc, &spec).unwrap();
    let mut dup = tasks[0].clone();
    dup.id = 9;
    let (twice, _) = meta_step(&model, &[tasks[0].clone(), dup], &tc, &spec).unwrap();
    assert_eq!(once.params, twice.params);

    let (a, sa) = meta_step(&model, &tasks, &tc, &spec).unwrap();
    let shuffled = vec![tasks[2].clone(), tasks[0].clone(), tasks[1].clone()];
    let (b, sb) = meta_step(&model, &shuffled, &tc, &spec).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.bn, b.bn);
    assert_eq!(sa, sb);
    assert!(meta_step(&model, &[], &tc, &spec).is_err());
}

#[test]
fn two_task_second_order_step_matches_finite_differences() {
    let cfg = two_layer_config(3);
    let mut r = rng(31);
    let tasks: Vec<_> = (0..2)
        .map(|i| episode(i, random_items(&mut r, &cfg, 2, 100 * i as usize), random_items(&mut r, &cfg, 2, 100 * i as usize + 50), 3))
        .collect();
    let theta = start(&cfg, 31);
    let model = Model::init(cfg.clone(), 0).unwrap().with_params(theta.clone());
    let beta = 0.5;
    let (next, _) = meta_step(&model, &tasks, &maml_cfg(beta, 1, GradMode::SecondOrder), &spec_for(3)).unwrap();
    let implied = theta.axpy(-1.0, &next.params).unwrap().scaled(1.0 / beta).unwrap();
    let objective = |p: &ParamSet| -> fmaml_core::Result<f64> {
        let mut total = 0.0;
        for t in &tasks {
            total += bilevel_loss(&cfg, p, &t.support, &t.query, 0.1, 1, None)?;
        }
        Ok(total / tasks.len() as f64)
    };
    let fd = finite_diff_grad(objective, &theta, 1e-5).unwrap();
    assert_close(&implied, &fd, 1e-3);
}

fn synthetic_registry(classes: usize) -> (fmaml_core::episodes::DatasetRegistry, Vec<String>) {
    use fmaml_core::audio::FeatureClip;
    use fmaml_core::episodes::{register_corpus, InputShape};
    let mut r = rng(77);
    let mut clips = Vec::new();
    for lang in ["l0", "l1"] {
        for c in 0..classes {
            for k in 0..20 {
                let m = Tensor::from_fn(&[8, 8], |j| {
                    let (y, x) = (j / 8, j % 8);
                    2.0 * (((c + 1) * (y + 1) + c * x) as f64 * 0.9).sin() + 0.4 * (rand::Rng::random::<f64>(&mut r) - 0.5)
                })
                .unwrap();
                clips.push(FeatureClip::new(m, format!("e{c}"), lang, format!("{lang}/e{c}/{k}")).unwrap());
            }
        }
    }
    let reg = register_corpus(clips, &InputShape { t_fixed: 8, height: 8, width: 8 }).unwrap();
    (reg, vec!["l0".into(), "l1".into()])
}

#[test]
fn smoke_meta_training_lowers_meta_loss_and_is_deterministic() {
    let cfg = tiny_config(4);
    let (reg, langs) = synthetic_registry(4);
    let spec = EpisodeSpec { n_new: 4, n_fixed: 0, k_shot: 3, q_new: 3, q_fixed: 1 };
    let tc = TrainConfig { beta: 0.1, meta_batch: 4, inner_steps: 2, meta_iters: 30, variant: Variant::Maml, seed: 5, ..TrainConfig::default() };
    let (model, trace) = meta_train(&reg, &spec, &langs, &cfg, &tc).unwrap();
    assert_eq!(trace.len(), 30);
    let l = trace.losses();
    let head: f64 = l[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = l[25..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "meta loss {head} -> {tail}");
    let (again, trace2) = meta_train(&reg, &spec, &langs, &cfg, &tc).unwrap();
    assert_eq!(model.params, again.params);
    assert_eq!(trace.losses(), trace2.losses());

    let zero = TrainConfig { meta_iters: 0, ..tc.clone() };
    let (init, empty) = meta_train(&reg, &spec, &langs, &cfg, &zero).unwrap();
    assert!(empty.is_empty());
    assert_eq!(init.params, Model::init(cfg.clone(), 5).unwrap().params);

    let fmaml = TrainConfig { variant: Variant::Fmaml, ..tc };
    assert!(meta_train(&reg, &spec, &langs, &cfg, &fmaml).is_err());
}

#[test]
fn fine_tune_freezes_fixed_rows_under_fmaml() {
    let cfg = tiny_config(7);
    let spec = EpisodeSpec::default();
    let mut r = rng(12);
    let model = Model::init(cfg.clone(), 12).unwrap();
    let support: Vec<_> = random_items(&mut r, &cfg, 2, 0).into_iter().filter(|it| it.slot < 5).collect();
    let tc = TrainConfig { variant: Variant::Fmaml, ..TrainConfig::default() };
    let tuned = fine_tune(&model, &support, &spec, &tc).unwrap();
    let rows = |m: &Model, name: &str| -> Vec<f64> {
        let t = m.params.get(name).unwrap();
        let per = t.len() / 7;
        t.data()[5 * per..].to_vec()
    };
    for name in [HEAD_WEIGHT, HEAD_BIAS] {
        assert_eq!(rows(&tuned, name), rows(&model, name));
        assert_ne!(tuned.params.get(name).unwrap(), model.params.get(name).unwrap());
    }
    assert_eq!(tuned.bn, model.bn);

    let unfrozen = TrainConfig { freeze_fixed: false, ..tc.clone() };
    let a = fine_tune(&model, &support, &spec, &unfrozen).unwrap();
    assert_eq!(a.params, inner_adapt(&cfg, &model.params, &support, 0.1, unfrozen.finetune_steps()).unwrap());
    assert_ne!(rows(&a, HEAD_WEIGHT), rows(&model, HEAD_WEIGHT));

    let none = TrainConfig { finetune_iters: Some(0), ..tc };
    assert_eq!(fine_tune(&model, &support, &spec, &none).unwrap().params, model.params);
}

#[test]
fn constant_prediction_scores_one_in_seven() {
    let cfg = tiny_config(7);
    let mut model = Model::init(cfg.clone(), 0).unwrap();
    let w = model.params.get(HEAD_WEIGHT).unwrap().shape().to_vec();
    model.params.replace(HEAD_WEIGHT, Tensor::zeros(&w)).unwrap();
    model.params.replace(HEAD_BIAS, Tensor::new(vec![7], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
    let items = random_items(&mut rng(1), &cfg, 10, 0);
    assert!((evaluate(&model, &items).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    // All-equal logits resolve to slot 0 as well.
    model.params.replace(HEAD_BIAS, Tensor::zeros(&[7])).unwrap();
    assert!((evaluate(&model, &items).unwrap() - 1.0 / 7.0).abs() < 1e-15);
    assert!(evaluate(&model, &[]).is_err());
}

#[test]
fn heavy_fine_tuning_memorises_a_tiny_support() {
    let cfg = tiny_config(4);
    let items = separable_items(&mut rng(2), &cfg, 2, 0);
    let model = Model::init(cfg.clone(), 2).unwrap();
    let tc = TrainConfig { variant: Variant::Maml, finetune_iters: Some(200), ..TrainConfig::default() };
    let tuned = fine_tune(&model, &items, &spec_for(4), &tc).unwrap();
    // Fine-tuning keeps the initial running buffers (identity for a fresh
    // model), so score with the support's own batch statistics.
    assert_eq!(evaluate_with(&tuned, &items, BnMode::Batch).unwrap(), 1.0);
}

#[test]
fn random_initialisation_is_near_chance() {
    let cfg = tiny_config(7);
    for seed in 0..50 {
        let model = Model::init(cfg.clone(), seed).unwrap();
        let items = random_items(&mut rng(1000 + seed), &cfg, 25, 0);
        let acc = evaluate(&model, &items).unwrap();
        assert!((acc - 1.0 / 7.0).abs() <= 0.12, "seed {seed}: {acc}");
    }
}

#[test]
fn supervised_baseline_fits_its_support() {
    let cfg = tiny_config(5);
    let items = separable_items(&mut rng(3), &cfg, 20, 0);
    let tc = TrainConfig::default();
    let zero = TrainConfig { baseline_epochs: 0, ..tc.clone() };
    assert_eq!(supervised_baseline(&cfg, &items, &zero, 9).unwrap().params, Model::init(cfg.clone(), 9).unwrap().params);
    let a = supervised_baseline(&cfg, &items, &tc, 9).unwrap();
    let b = supervised_baseline(&cfg, &items, &tc, 9).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.bn, b.bn);
    assert_eq!(evaluate(&a, &items).unwrap(), 1.0);
    assert!(supervised_baseline(&cfg, &[], &tc, 9).is_err());
}

#[test]
fn protocol_reports_are_reproducible() {
    let cfg = tiny_config(4);
    let (reg, _) = synthetic_registry(4);
    let spec = EpisodeSpec { n_new: 4, n_fixed: 0, k_shot: 3, q_new: 3, q_fixed: 1 };
    let tc = TrainConfig { variant: Variant::Maml, seed: 3, ..TrainConfig::default() };
    let model = Model::init(cfg.clone(), 3).unwrap();
    let run = |trials| run_protocol(&reg, &spec, "l0", Learner::Meta(&model), &cfg, &tc, trials, 5).unwrap();
    let one = run(1);
    assert_eq!(one.std, 0.0);
    assert_eq!(one.mean, one.trials[0]);
    let many = run(12);
    assert_eq!(many, run(12));
    assert_eq!(many.trials[0], one.trials[0]);
    assert!(many.std > 0.0);
    let sup = run_protocol(&reg, &spec, "l0", Learner::Supervised, &cfg, &tc, 3, 5).unwrap();
    assert_eq!(sup.trials.len(), 3);
    assert!(run_protocol(&reg, &spec, "l0", Learner::Meta(&model), &cfg, &tc, 0, 5).is_err());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let cfg = tiny_config(7);
    let mut model = Model::init(cfg.clone(), 4).unwrap();
    model.bn.mean[0][1] = 0.25;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, "abc123", 42).unwrap();
    let (back, hash, seed) = load_checkpoint(&path).unwrap();
    assert_eq!(back.params, model.params);
    assert_eq!(back.bn, model.bn);
    assert_eq!(back.config, model.config);
    assert_eq!((hash.as_str(), seed), ("abc123", 42));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}
