use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    batch_cross_entropy, blend, epoch_record, mixed_cross_entropy, monitor_metrics, shuffled, Batch, LossRecord,
    Monitor, Phase, ReplicaRefresh, RngState, TrainConfig, TrainRun,
};
use crate::context_bank::ContextBank;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, Head, StepGroups};
use crate::nn::Sgd;
use crate::rng::{stream_rng, streams};
use crate::saliency::extract_from_pass;
use crate::sampling::build_balanced_replica_with;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a step does with the balanced branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Uniform branch only; no extraction.
    Warmup,
    /// Extraction, and blended balanced batches once the bank is full.
    Augment,
    /// Balanced branch on unblended batches; no extraction.
    Plain,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: LossRecord,
    /// The balanced-branch inputs actually used (after blending).
    pub balanced_inputs: Option<Batch>,
    pub lambdas: Vec<f64>,
    pub extracted: usize,
    pub groups: StepGroups,
}

/// Forward and backward of one step; parameter gradients are accumulated
/// but not applied.
#[allow(clippy::too_many_arguments)]
pub fn csa_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut DualBranchModel<T>,
    uniform: &Batch,
    balanced: &Batch,
    bank: &mut ContextBank,
    config: &TrainConfig,
    mode: StepMode,
    rng: &mut R,
) -> Result<StepOutput> {
    if mode != StepMode::Warmup && uniform.len() != balanced.len() {
        return Err(Error::Shape(format!(
            "uniform batch of {} vs balanced batch of {}",
            uniform.len(),
            balanced.len()
        )));
    }
    let n = uniform.len();

    let (pass_u, dzu, lu, zu) = if config.mixup_uniform {
        let perm = {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(rng);
            p
        };
        let lam = super::baseline::mixup_weight(config.mixup_alpha, rng);
        let mixed = super::baseline::mix_images(&uniform.images, &perm, lam, n);
        let x = model.prepare(&mixed, n)?;
        let pass = model.features(&x, true);
        let z = model.logits(Head::Uniform, &pass.features);
        let other: Vec<usize> = perm.iter().map(|&j| uniform.labels[j]).collect();
        let (l, dz) = mixed_cross_entropy(&z, &uniform.labels, &other, &vec![lam; n])?;
        (pass, dz, l, None)
    } else {
        let x = model.prepare(&uniform.images, n)?;
        let pass = model.features(&x, true);
        let z = model.logits(Head::Uniform, &pass.features);
        let (l, dz) = batch_cross_entropy(&z, &uniform.labels)?;
        (pass, dz, l, Some(z))
    };

    let mut extracted = 0;
    if mode == StepMode::Augment {
        let contexts = match &zu {
            Some(z) => extract_from_pass(model, &pass_u, z, &uniform.images, &uniform.labels, config.delta)?,
            None => {
                let x = model.prepare(&uniform.images, n)?;
                let pass = model.features(&x, false);
                let z = model.logits(Head::Uniform, &pass.features);
                extract_from_pass(model, &pass, &z, &uniform.images, &uniform.labels, config.delta)?
            }
        };
        extracted = contexts.len();
        bank.extend(contexts)?;
    }

    let mut lambdas = Vec::new();
    let balanced_inputs = match mode {
        StepMode::Warmup => None,
        StepMode::Plain => Some(balanced.clone()),
        StepMode::Augment if !bank.is_ready() => None,
        StepMode::Augment => {
            let contexts = bank.sample_with(balanced.len(), rng)?;
            let per = balanced.images.len() / balanced.len().max(1);
            lambdas = if config.lambda_per_sample {
                (0..balanced.len()).map(|_| config.lambda.sample(rng)).collect()
            } else {
                vec![config.lambda.sample(rng); balanced.len()]
            };
            let mut images = Vec::with_capacity(balanced.images.len());
            for (i, ctx) in contexts.iter().enumerate() {
                images.extend(blend(&balanced.images[i * per..(i + 1) * per], ctx, lambdas[i] as f32)?);
            }
            Some(Batch {
                images,
                labels: balanced.labels.clone(),
            })
        }
    };

    let mut lb = 0.0;
    let mut pass_b = None;
    if let Some(bb) = &balanced_inputs {
        let x = model.prepare(&bb.images, bb.len())?;
        let pass = model.features(&x, true);
        let z = model.logits(Head::Balanced, &pass.features);
        let (l, dz) = batch_cross_entropy(&z, &bb.labels)?;
        lb = l;
        pass_b = Some((pass, dz));
    }

    model.backward(Head::Uniform, &pass_u, &dzu);
    if let Some((pass, dz)) = &pass_b {
        model.backward(Head::Balanced, pass, dz);
    }
    let groups = if pass_b.is_some() {
        StepGroups::ALL
    } else {
        StepGroups::UNIFORM_BRANCH
    };
    Ok(StepOutput {
        record: LossRecord::new(lu, lb, pass_b.is_some()),
        balanced_inputs,
        lambdas,
        extracted,
        groups,
    })
}

/// One full context-shift step: forward both branches, extract, blend,
/// and apply a single update on `L = L^u + L^b`.
pub fn train_step_csa<T: Scalar, R: Rng + ?Sized>(
    model: &mut DualBranchModel<T>,
    sgd: &Sgd,
    uniform: &Batch,
    balanced: &Batch,
    bank: &mut ContextBank,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<LossRecord> {
    let out = csa_step(model, uniform, balanced, bank, config, StepMode::Augment, rng)?;
    model.step(sgd, out.groups);
    Ok(out.record)
}

/// Losses of both branches on fixed inputs, without touching gradients.
pub fn branch_losses<T: Scalar>(
    model: &mut DualBranchModel<T>,
    uniform: &Batch,
    balanced: Option<&Batch>,
) -> Result<(f64, f64)> {
    let loss = |model: &mut DualBranchModel<T>, b: &Batch, head: Head| -> Result<f64> {
        let x = model.prepare(&b.images, b.len())?;
        let f = model.features(&x, true).features;
        let z: Tensor<T> = model.logits(head, &f);
        Ok(batch_cross_entropy(&z, &b.labels)?.0)
    };
    let lu = loss(model, uniform, Head::Uniform)?;
    let lb = match balanced {
        Some(b) => loss(model, b, Head::Balanced)?,
        None => 0.0,
    };
    Ok((lu, lb))
}

/// Warm-up on the uniform branch, then context-shift training, then
/// plain balanced batches for the final `freeze_aug_last_epochs` epochs.
pub fn train_csa<T: Scalar>(
    train: &ImageSet,
    config: &TrainConfig,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainRun<T>> {
    config.validate_csa()?;
    let mut model = config.init_model::<T>(train);
    let n = train.len();
    let b = config.batch_size;
    let iters = n.div_ceil(b);
    let mut sgd = Sgd::new(config.optimizer.clone());
    let mut bank = ContextBank::new(config.bank_capacity(), train.height, train.width, train.channels)?;

    let mut rng_replica = stream_rng(config.seed, streams::REPLICA);
    let mut rng_order = stream_rng(config.seed, streams::UNIFORM_ORDER);
    let mut rng_aug = stream_rng(config.seed, streams::AUGMENT);
    let mut rng_step = stream_rng(config.seed, streams::BANK);
    let all: Vec<usize> = (0..n).collect();
    let mut replica = build_balanced_replica_with(train, &mut rng_replica);

    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(config.epochs * iters);
    for epoch in 0..config.epochs {
        let mode = if epoch < config.warmup_epochs {
            StepMode::Warmup
        } else if epoch >= config.epochs - config.freeze_aug_last_epochs {
            StepMode::Plain
        } else {
            StepMode::Augment
        };
        if epoch > 0 && config.replica_refresh == ReplicaRefresh::PerEpoch {
            replica = build_balanced_replica_with(train, &mut rng_replica);
        }
        let order_u = shuffled(&all, &mut rng_order);
        let order_b = shuffled(&replica, &mut rng_order);
        let mut epoch_losses = Vec::with_capacity(iters);
        for it in 0..iters {
            let (s, e) = (it * b, ((it + 1) * b).min(n));
            sgd.set_progress(epoch, it, iters, config.epochs);
            let ub = Batch::gather_augmented(train, &order_u[s..e], config.augment, &mut rng_aug);
            let bb = if mode == StepMode::Warmup {
                Batch {
                    images: Vec::new(),
                    labels: Vec::new(),
                }
            } else {
                Batch::gather_augmented(train, &order_b[s..e], config.augment, &mut rng_aug)
            };
            let out = csa_step(&mut model, &ub, &bb, &mut bank, config, mode, &mut rng_step)?;
            model.step(&sgd, out.groups);
            if !out.record.total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            epoch_losses.push(out.record);
        }
        let last = epoch + 1 == config.epochs;
        let metrics = if config.eval_each_epoch || last {
            monitor_metrics(&mut model, monitor)?
        } else {
            None
        };
        let phase = match mode {
            StepMode::Warmup => Phase::Warmup,
            StepMode::Augment => Phase::Augment,
            StepMode::Plain => Phase::Plain,
        };
        history.push(epoch_record(epoch, phase, sgd.lr, &epoch_losses, Some(&bank), metrics));
        steps.extend(epoch_losses);
    }
    let rng_states = vec![
        RngState::capture("replica", &rng_replica),
        RngState::capture("order", &rng_order),
        RngState::capture("augment", &rng_aug),
        RngState::capture("step", &rng_step),
    ];
    Ok(TrainRun {
        model,
        history,
        steps,
        rng_states,
    })
}
