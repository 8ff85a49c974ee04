mod common;

use ctxshift::data::ImageSet;
use ctxshift::evaluation::{predict, HeadChoice};
use ctxshift::model::StepGroups;
use ctxshift::nn::Sgd;
use ctxshift::rng::stream_rng;
use ctxshift::saliency::ContextEntry;
use ctxshift::training::{
    batch_cross_entropy, blend, branch_losses, crt_finetune, csa_step, draw_lambda, load_checkpoint, save_checkpoint,
    train_baseline, train_csa, BaselineMethod, Batch, LambdaDist, Phase, StepMode, TrainConfig,
};
use ctxshift::{ContextBank, DualBranchModel, DualBranchModelF64, Head, Scalar};
use proptest::prelude::*;

fn toy() -> ImageSet {
    common::banded(&[24, 12, 6, 4], 8, 8, 1, 11)
}

fn values_with<T: Scalar>(model: &mut DualBranchModel<T>, prefix: &str) -> Vec<(String, Vec<T>)> {
    model
        .named_values()
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .collect()
}

fn grads_with<T: Scalar>(model: &mut DualBranchModel<T>, prefix: &str) -> Vec<(String, Vec<T>)> {
    model
        .named_grads()
        .into_iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .collect()
}

fn nudge(model: &mut DualBranchModelF64, name: &str, j: usize, by: f64) {
    model.visit_params(&mut |n, p| {
        if n == name {
            p.value[j] += by;
        }
    });
}

/// A full bank of contexts cut from the set with random masks.
fn filled_bank(set: &ImageSet, capacity: usize, seed: u64) -> ContextBank {
    use rand::Rng;
    let mut rng = stream_rng(seed, 99);
    let mut bank = ContextBank::new(capacity, set.height, set.width, set.channels).unwrap();
    for i in 0..capacity {
        bank.push(ContextEntry {
            image: set.image(i % set.len()).to_vec(),
            mask: (0..set.height * set.width).map(|_| rng.random::<f32>()).collect(),
            height: set.height,
            width: set.width,
            channels: set.channels,
        })
        .unwrap();
    }
    bank
}

fn batches(set: &ImageSet, n: usize) -> (Batch, Batch) {
    let ub = Batch::gather(set, &(0..n).collect::<Vec<_>>());
    let bb = Batch::gather(set, &(0..n).map(|i| set.len() - 1 - i).collect::<Vec<_>>());
    (ub, bb)
}

#[test]
fn blend_endpoints_are_exact() {
    let target = vec![0.1f32, 0.9, 0.3, 0.0, 1.0, 0.5];
    let ctx = ContextEntry {
        image: vec![0.7, 0.2, 0.3, 1.0, 0.0, 0.45],
        mask: vec![1.0, 1.0, 1.0],
        height: 1,
        width: 3,
        channels: 2,
    };
    assert_eq!(blend(&target, &ctx, 0.0).unwrap(), target);
    assert_eq!(blend(&target, &ctx, 1.0).unwrap(), ctx.image);
    let half_mask = ContextEntry {
        mask: vec![0.0, 0.5, 1.0],
        ..ctx.clone()
    };
    let out = blend(&target, &half_mask, 1.0).unwrap();
    assert_eq!(&out[..2], &target[..2]);
    assert_eq!(&out[4..], &ctx.image[4..]);
    assert!(blend(&target, &ctx, 1.5).is_err());
    assert!(blend(&target[..4], &ctx, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn blend_is_a_masked_convex_combination(
        pixels in prop::collection::vec((0.0f32..=1.0, 0.0f32..=1.0), 12),
        mask in prop::collection::vec(0.0f32..=1.0, 4),
        lambda in 0.0f32..=1.0,
    ) {
        let (target, image): (Vec<f32>, Vec<f32>) = pixels.into_iter().unzip();
        let ctx = ContextEntry { image: image.clone(), mask: mask.clone(), height: 2, width: 2, channels: 3 };
        let out = blend(&target, &ctx, lambda).unwrap();
        for i in 0..12 {
            let (t, x) = (target[i], image[i]);
            prop_assert!(out[i] >= t.min(x) && out[i] <= t.max(x));
            let a = lambda * mask[i / 3];
            prop_assert!((out[i] - (a * x + (1.0 - a) * t)).abs() <= 1e-6);
        }
    }
}

#[test]
fn lambda_draws_stay_in_support() {
    for seed in 0..200 {
        let u = draw_lambda(&LambdaDist::Uniform { a: 0.2, b: 0.6 }, seed).unwrap();
        assert!((0.2..=0.6).contains(&u));
        let b = draw_lambda(&LambdaDist::Beta { a: 0.5, b: 0.5 }, seed).unwrap();
        assert!((0.0..=1.0).contains(&b));
    }
    assert_eq!(draw_lambda(&LambdaDist::Uniform { a: 0.3, b: 0.3 }, 0).unwrap(), 0.3);
    assert!(draw_lambda(&LambdaDist::Uniform { a: 0.5, b: 1.5 }, 0).is_err());
    assert!(draw_lambda(&LambdaDist::Beta { a: 0.0, b: 1.0 }, 0).is_err());
}

#[test]
fn total_loss_is_the_sum_of_branches() {
    let set = toy();
    let mut cfg = common::tiny_config(2);
    cfg.epochs = 5;
    cfg.delta = 0.0;
    let run = train_csa::<f32>(&set, &cfg, None).unwrap();
    let iters = set.len().div_ceil(cfg.batch_size);
    assert_eq!(run.steps.len(), cfg.epochs * iters);
    for s in &run.steps {
        assert_eq!(s.total, s.loss_uniform + s.loss_balanced);
    }
    for s in &run.steps[..iters] {
        assert_eq!(s.loss_balanced, 0.0);
    }
    assert!(run.steps[iters..].iter().all(|s| s.bank_ready && s.loss_balanced > 0.0));
    for r in &run.history {
        assert_eq!(r.loss_total, r.loss_uniform + r.loss_balanced);
    }
    let phases: Vec<Phase> = run.history.iter().map(|r| r.phase).collect();
    assert_eq!(
        phases,
        vec![
            Phase::Warmup,
            Phase::Augment,
            Phase::Augment,
            Phase::Augment,
            Phase::Plain
        ]
    );
}

#[test]
fn balanced_loss_waits_for_a_full_bank() {
    let set = toy();
    let mut cfg = common::tiny_config(2);
    cfg.bank_capacity = Some(1_000_000);
    let run = train_csa::<f32>(&set, &cfg, None).unwrap();
    let iters = set.len().div_ceil(cfg.batch_size);
    let augment = &run.steps[..(cfg.epochs - cfg.freeze_aug_last_epochs) * iters];
    assert!(augment.iter().all(|s| !s.bank_ready && s.loss_balanced == 0.0));
    assert!(run.steps[augment.len()..].iter().all(|s| s.loss_balanced > 0.0));
}

#[test]
fn step_gradient_matches_finite_differences() {
    let set = toy();
    let mut cfg = common::tiny_config(4);
    cfg.delta = 0.0;
    for mode in [StepMode::Augment, StepMode::Plain, StepMode::Warmup] {
        let mut model = cfg.init_model::<f64>(&set);
        let (ub, bb) = batches(&set, 6);
        let mut bank = filled_bank(&set, 6, 1);
        let mut rng = stream_rng(7, 0);
        let out = csa_step(&mut model, &ub, &bb, &mut bank, &cfg, mode, &mut rng).unwrap();
        assert_eq!(out.balanced_inputs.is_some(), mode != StepMode::Warmup);
        if mode == StepMode::Augment {
            assert_eq!(out.lambdas.len(), 6);
            assert_ne!(out.balanced_inputs.as_ref().unwrap().images, bb.images);
        }
        let (lu, lb) = branch_losses(&mut model, &ub, out.balanced_inputs.as_ref()).unwrap();
        assert!((out.record.total - (lu + lb)).abs() < 1e-12);

        let grads = model.named_grads();
        let eps = 1e-5;
        for (name, g) in &grads {
            for j in [0, g.len() / 2, g.len() - 1] {
                nudge(&mut model, name, j, eps);
                let (a, b) = branch_losses(&mut model, &ub, out.balanced_inputs.as_ref()).unwrap();
                nudge(&mut model, name, j, -2.0 * eps);
                let (c, d) = branch_losses(&mut model, &ub, out.balanced_inputs.as_ref()).unwrap();
                nudge(&mut model, name, j, eps);
                let numeric = ((a + b) - (c + d)) / (2.0 * eps);
                let err = (numeric - g[j]).abs() / numeric.abs().max(g[j].abs()).max(1e-6);
                assert!(err < 1e-4, "{mode:?} {name}[{j}]: analytic {} numeric {numeric}", g[j]);
            }
        }
    }
}

#[test]
fn zero_lambda_gives_plain_balanced_gradients() {
    let set = toy();
    let mut cfg = common::tiny_config(5);
    cfg.lambda = LambdaDist::Uniform { a: 0.0, b: 0.0 };
    let (ub, bb) = batches(&set, 8);
    let mut a = cfg.init_model::<f64>(&set);
    let mut b = a.clone();

    let mut bank = filled_bank(&set, 8, 2);
    let out = csa_step(
        &mut a,
        &ub,
        &bb,
        &mut bank,
        &cfg,
        StepMode::Augment,
        &mut stream_rng(0, 0),
    )
    .unwrap();
    assert_eq!(out.balanced_inputs.unwrap().images, bb.images);

    for (batch, head) in [(&ub, Head::Uniform), (&bb, Head::Balanced)] {
        let x = b.prepare(&batch.images, batch.len()).unwrap();
        let pass = b.features(&x, true);
        let z = b.logits(head, &pass.features);
        let (_, dz) = batch_cross_entropy(&z, &batch.labels).unwrap();
        b.backward(head, &pass, &dz);
    }
    assert_eq!(grads_with(&mut a, "head_balanced"), grads_with(&mut b, "head_balanced"));
    assert_eq!(grads_with(&mut a, "head_uniform"), grads_with(&mut b, "head_uniform"));
    let ea = grads_with(&mut a, "extractor");
    let eb = grads_with(&mut b, "extractor");
    for ((_, x), (_, y)) in ea.iter().zip(&eb) {
        assert!(common::max_abs_diff(x, y) < 1e-12);
    }
}

#[test]
fn warmup_never_touches_the_balanced_head() {
    let set = toy();
    let cfg = common::tiny_config(6);
    let mut model = cfg.init_model::<f32>(&set);
    let before = values_with(&mut model, "head_balanced");
    let sgd = Sgd::new(cfg.optimizer.clone());
    let mut bank = filled_bank(&set, cfg.bank_capacity(), 3);
    let empty = Batch {
        images: vec![],
        labels: vec![],
    };
    let mut rng = stream_rng(0, 0);
    for start in (0..set.len() - 8).step_by(8) {
        let ub = Batch::gather(&set, &(start..start + 8).collect::<Vec<_>>());
        let out = csa_step(&mut model, &ub, &empty, &mut bank, &cfg, StepMode::Warmup, &mut rng).unwrap();
        assert_eq!(out.groups, StepGroups::UNIFORM_BRANCH);
        assert_eq!(out.extracted, 0);
        assert_eq!(out.record.loss_balanced, 0.0);
        assert!(grads_with(&mut model, "head_balanced")
            .iter()
            .all(|(_, g)| g.iter().all(|&v| v == 0.0)));
        model.step(&sgd, out.groups);
    }
    assert_eq!(values_with(&mut model, "head_balanced"), before);
    assert_ne!(
        values_with(&mut model, "head_uniform"),
        values_with(&mut cfg.init_model::<f32>(&set), "head_uniform")
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let set = toy();
    let cfg = common::tiny_config(8);
    let mut a = train_csa::<f32>(&set, &cfg, None).unwrap();
    let mut b = train_csa::<f32>(&set, &cfg, None).unwrap();
    assert_eq!(a.model.named_values(), b.model.named_values());
    assert_eq!(a.history, b.history);
    let mut other = cfg.clone();
    other.seed = 9;
    let mut c = train_csa::<f32>(&set, &other, None).unwrap();
    assert_ne!(a.model.named_values(), c.model.named_values());
}

#[test]
fn checkpoint_reproduces_predictions() {
    let set = toy();
    let cfg = common::tiny_config(10);
    let mut run = train_csa::<f32>(&set, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(
        &path,
        &mut run.model,
        cfg.epochs,
        0.01,
        run.rng_states.clone(),
        serde_json::json!({"k": 1}),
    )
    .unwrap();
    let mut ckpt = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(ckpt.header.epoch, cfg.epochs);
    assert_eq!(ckpt.header.config["k"], 1);
    assert_eq!(ckpt.model.named_values(), run.model.named_values());
    for head in [HeadChoice::Uniform, HeadChoice::Balanced, HeadChoice::Ensemble] {
        assert_eq!(
            predict(&mut ckpt.model, &set, head).unwrap(),
            predict(&mut run.model, &set, head).unwrap()
        );
    }
    for state in &ckpt.header.rng {
        state.restore().unwrap();
    }
    assert!(load_checkpoint::<f64>(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn retraining_freezes_extractor_and_uniform_head() {
    let set = toy();
    let cfg = common::tiny_config(12);
    let mut model = train_baseline::<f32>(&set, &cfg, BaselineMethod::Ce, None)
        .unwrap()
        .model;
    let extractor = values_with(&mut model, "extractor");
    let uniform = values_with(&mut model, "head_uniform");
    let balanced = values_with(&mut model, "head_balanced");
    let history = crt_finetune(&mut model, &set, &cfg, 3, None).unwrap();
    assert_eq!(history.len(), 3);
    assert!(history.iter().all(|r| r.phase == Phase::Retrain));
    assert_eq!(values_with(&mut model, "extractor"), extractor);
    assert_eq!(values_with(&mut model, "head_uniform"), uniform);
    assert_ne!(values_with(&mut model, "head_balanced"), balanced);
}

#[test]
fn baselines_train_only_their_own_head() {
    let set = toy();
    let cfg = common::tiny_config(13);
    let mut init = cfg.init_model::<f32>(&set);
    let mut ce = train_baseline::<f32>(&set, &cfg, BaselineMethod::Ce, None)
        .unwrap()
        .model;
    assert_eq!(
        values_with(&mut ce, "head_balanced"),
        values_with(&mut init, "head_balanced")
    );
    assert_ne!(
        values_with(&mut ce, "head_uniform"),
        values_with(&mut init, "head_uniform")
    );
    let mut rs = train_baseline::<f32>(&set, &cfg, BaselineMethod::CbRs, None)
        .unwrap()
        .model;
    assert_eq!(
        values_with(&mut rs, "head_uniform"),
        values_with(&mut init, "head_uniform")
    );
    assert_ne!(
        values_with(&mut rs, "head_balanced"),
        values_with(&mut init, "head_balanced")
    );
    let mut mix = train_baseline::<f32>(&set, &cfg, BaselineMethod::Mixup, None)
        .unwrap()
        .model;
    assert_eq!(
        values_with(&mut mix, "head_balanced"),
        values_with(&mut init, "head_balanced")
    );
}

#[test]
fn schedule_is_checked_for_context_shift_only() {
    let set = toy();
    let mut cfg = common::tiny_config(0);
    cfg.epochs = 1;
    assert!(train_csa::<f32>(&set, &cfg, None).is_err());
    assert!(train_baseline::<f32>(&set, &cfg, BaselineMethod::Ce, None).is_ok());
    let bad = TrainConfig {
        delta: 1.2,
        ..common::tiny_config(0)
    };
    assert!(train_baseline::<f32>(&set, &bad, BaselineMethod::Ce, None).is_err());
}
