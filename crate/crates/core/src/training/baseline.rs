use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{
    batch_cross_entropy, epoch_record, mixed_cross_entropy, monitor_metrics, shuffled, Batch, LossRecord, Monitor,
    Phase, ReplicaRefresh, RngState, TrainConfig, TrainRun,
};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::{DualBranchModel, Head, StepGroups};
use crate::nn::{ParamGrads, Sgd};
use crate::rng::{stream_rng, streams};
use crate::sampling::build_balanced_replica_with;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    /// Instance-uniform sampling, uniform head.
    Ce,
    /// Class-balanced re-sampling throughout, balanced head.
    CbRs,
    /// Uniform sampling with pairwise image/label mixing, uniform head.
    Mixup,
}

impl BaselineMethod {
    pub fn head(self) -> Head {
        match self {
            BaselineMethod::CbRs => Head::Balanced,
            BaselineMethod::Ce | BaselineMethod::Mixup => Head::Uniform,
        }
    }
}

/// Mixing weight from `Beta(alpha, alpha)`; `alpha = 0` means no mixing.
pub(super) fn mixup_weight<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if alpha <= 0.0 {
        return 1.0;
    }
    Beta::new(alpha, alpha).map_or(1.0, |d| {
        let v = d.sample(rng);
        if v.is_finite() {
            v.clamp(0.0, 1.0)
        } else {
            1.0
        }
    })
}

/// `lam * x_i + (1 - lam) * x_perm[i]` over `n` equally sized images.
pub(super) fn mix_images(images: &[f32], perm: &[usize], lam: f64, n: usize) -> Vec<f32> {
    let per = images.len() / n.max(1);
    let lam = lam as f32;
    let mut out = Vec::with_capacity(images.len());
    for (i, &j) in perm.iter().enumerate() {
        let a = &images[i * per..(i + 1) * per];
        let b = &images[j * per..(j + 1) * per];
        out.extend(a.iter().zip(b).map(|(&x, &y)| lam * x + (1.0 - lam) * y));
    }
    out
}

/// Trains one head of a fresh model under the baseline's sampling scheme.
pub fn train_baseline<T: Scalar>(
    train: &ImageSet,
    config: &TrainConfig,
    method: BaselineMethod,
    monitor: Option<Monitor<'_>>,
) -> Result<TrainRun<T>> {
    config.validate()?;
    let mut model = config.init_model::<T>(train);
    let n = train.len();
    let b = config.batch_size;
    let iters = n.div_ceil(b);
    let head = method.head();
    let groups = match head {
        Head::Uniform => StepGroups::UNIFORM_BRANCH,
        Head::Balanced => StepGroups::BALANCED_BRANCH,
    };
    let mut sgd = Sgd::new(config.optimizer.clone());
    let mut rng_replica = stream_rng(config.seed, streams::REPLICA);
    let mut rng_order = stream_rng(config.seed, streams::UNIFORM_ORDER);
    let mut rng_aug = stream_rng(config.seed, streams::AUGMENT);
    let mut rng_mix = stream_rng(config.seed, streams::MIXUP);
    let all: Vec<usize> = (0..n).collect();
    let mut replica = (method == BaselineMethod::CbRs).then(|| build_balanced_replica_with(train, &mut rng_replica));

    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = Vec::with_capacity(config.epochs * iters);
    for epoch in 0..config.epochs {
        if epoch > 0 && config.replica_refresh == ReplicaRefresh::PerEpoch && replica.is_some() {
            replica = Some(build_balanced_replica_with(train, &mut rng_replica));
        }
        let order = shuffled(replica.as_deref().unwrap_or(&all), &mut rng_order);
        let mut epoch_losses = Vec::with_capacity(iters);
        for it in 0..iters {
            let (s, e) = (it * b, ((it + 1) * b).min(n));
            sgd.set_progress(epoch, it, iters, config.epochs);
            let batch = Batch::gather_augmented(train, &order[s..e], config.augment, &mut rng_aug);
            let m = batch.len();
            let (images, dz_and_loss) = if method == BaselineMethod::Mixup {
                let mut perm: Vec<usize> = (0..m).collect();
                perm.shuffle(&mut rng_mix);
                let lam = mixup_weight(config.mixup_alpha, &mut rng_mix);
                let other: Vec<usize> = perm.iter().map(|&j| batch.labels[j]).collect();
                (mix_images(&batch.images, &perm, lam, m), Some((other, lam)))
            } else {
                (batch.images, None)
            };
            let x = model.prepare(&images, m)?;
            let pass = model.features(&x, true);
            let z = model.logits(head, &pass.features);
            let (loss, dz) = match &dz_and_loss {
                Some((other, lam)) => mixed_cross_entropy(&z, &batch.labels, other, &vec![*lam; m])?,
                None => batch_cross_entropy(&z, &batch.labels)?,
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            model.backward(head, &pass, &dz);
            model.step(&sgd, groups);
            let record = match head {
                Head::Uniform => LossRecord::new(loss, 0.0, false),
                Head::Balanced => LossRecord::new(0.0, loss, false),
            };
            epoch_losses.push(record);
        }
        let last = epoch + 1 == config.epochs;
        let metrics = if config.eval_each_epoch || last {
            monitor_metrics(&mut model, monitor)?
        } else {
            None
        };
        let phase = match method {
            BaselineMethod::Ce => Phase::Uniform,
            BaselineMethod::CbRs => Phase::Balanced,
            BaselineMethod::Mixup => Phase::Mixup,
        };
        history.push(epoch_record(epoch, phase, sgd.lr, &epoch_losses, None, metrics));
        steps.extend(epoch_losses);
    }
    let rng_states = vec![
        RngState::capture("replica", &rng_replica),
        RngState::capture("order", &rng_order),
        RngState::capture("augment", &rng_aug),
        RngState::capture("mixup", &rng_mix),
    ];
    Ok(TrainRun {
        model,
        history,
        steps,
        rng_states,
    })
}

/// Classifier re-training: freezes the extractor, re-initializes the
/// balanced head and trains it for `epochs` epochs on class-balanced
/// batches. The uniform head and extractor are left bit-identical.
pub fn crt_finetune<T: Scalar>(
    model: &mut DualBranchModel<T>,
    train: &ImageSet,
    config: &TrainConfig,
    epochs: usize,
    monitor: Option<Monitor<'_>>,
) -> Result<Vec<super::EpochRecord>> {
    let mut rng = stream_rng(config.seed, streams::CRT);
    model.head_balanced.reset(&mut rng);
    let n = train.len();
    let b = config.batch_size;
    let iters = n.div_ceil(b);
    let mut sgd = Sgd::new(config.optimizer.clone());
    let mut rng_aug = stream_rng(config.seed ^ 0x5eed, streams::AUGMENT);
    let per = train.image_len();

    // Without augmentation the frozen features are fixed: compute them once.
    let cached: Option<Tensor<T>> = if config.augment == super::Augment::None {
        let mut rows = Vec::with_capacity(n * model.extractor.feature_dim);
        for start in (0..n).step_by(500) {
            let end = (start + 500).min(n);
            let x = model.prepare(&train.images[start * per..end * per], end - start)?;
            rows.extend_from_slice(model.features(&x, false).features.data());
        }
        Some(Tensor::from_vec(&[n, model.extractor.feature_dim], rows)?)
    } else {
        None
    };

    let mut replica = build_balanced_replica_with(train, &mut rng);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        if epoch > 0 && config.replica_refresh == ReplicaRefresh::PerEpoch {
            replica = build_balanced_replica_with(train, &mut rng);
        }
        let order = shuffled(&replica, &mut rng);
        let mut losses = Vec::with_capacity(iters);
        for it in 0..iters {
            let idx = &order[it * b..((it + 1) * b).min(n)];
            sgd.set_progress(epoch, it, iters, epochs);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let feats = match &cached {
                Some(all) => {
                    let d = all.dim(1);
                    let mut f = Vec::with_capacity(idx.len() * d);
                    for &i in idx {
                        f.extend_from_slice(all.outer(i));
                    }
                    Tensor::from_vec(&[idx.len(), d], f)?
                }
                None => {
                    let batch = Batch::gather_augmented(train, idx, config.augment, &mut rng_aug);
                    let x = model.prepare(&batch.images, idx.len())?;
                    model.features(&x, false).features
                }
            };
            let z = model.head_balanced.forward(&feats);
            let (loss, dz) = batch_cross_entropy(&z, &labels)?;
            model.head_balanced.backward(&feats, &dz, ParamGrads::Accumulate, false);
            model.step(
                &sgd,
                StepGroups {
                    extractor: false,
                    uniform: false,
                    balanced: true,
                },
            );
            losses.push(LossRecord::new(0.0, loss, false));
        }
        let metrics = if config.eval_each_epoch || epoch + 1 == epochs {
            monitor_metrics(model, monitor)?
        } else {
            None
        };
        history.push(epoch_record(epoch, Phase::Retrain, sgd.lr, &losses, None, metrics));
    }
    Ok(history)
}
