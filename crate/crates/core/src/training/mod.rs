//! Dual-branch context-shift training and the re-sampling baselines.

mod augment;
mod baseline;
mod checkpoint;
mod csa;

pub use augment::crop_flip;
pub use baseline::{crt_finetune, train_baseline, BaselineMethod};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, RngState};
pub use csa::{branch_losses, csa_step, train_csa, train_step_csa, StepMode, StepOutput};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::context_bank::ContextBank;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, HeadChoice, Metrics};
use crate::lt_data::{BenchmarkName, ShotGroups};
use crate::model::{DualBranchModel, Normalizer};
use crate::nn::{BackboneKind, BackboneSpec, LrSchedule, SgdConfig};
use crate::rng::{stream_rng, streams};
use crate::saliency::{fitting_probability, ContextEntry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Distribution of the blending weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaDist {
    Uniform { a: f64, b: f64 },
    Beta { a: f64, b: f64 },
}

impl LambdaDist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaDist::Uniform { a, b } if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b => Ok(()),
            LambdaDist::Beta { a, b } if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => Ok(()),
            other => Err(Error::Config(format!(
                "lambda distribution {other:?} has support outside [0, 1]"
            ))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LambdaDist::Uniform { a, b } => {
                if a == b {
                    a
                } else {
                    a + (b - a) * rng.random::<f64>()
                }
            }
            LambdaDist::Beta { a, b } => Beta::new(a, b).expect("validated").sample(rng).clamp(0.0, 1.0),
        }
    }
}

/// One blending weight from `dist`, deterministic in `seed`.
pub fn draw_lambda(dist: &LambdaDist, seed: u64) -> Result<f64> {
    dist.validate()?;
    Ok(dist.sample(&mut stream_rng(seed, streams::LAMBDA)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicaRefresh {
    Once,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augment {
    None,
    /// Zero-padded random crop plus random horizontal flip.
    CropFlip {
        pad: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub freeze_aug_last_epochs: usize,
    pub batch_size: usize,
    pub delta: f64,
    /// Defaults to the batch size.
    pub bank_capacity: Option<usize>,
    pub lambda: LambdaDist,
    /// Draw a blending weight per sample instead of per mini-batch.
    pub lambda_per_sample: bool,
    pub optimizer: SgdConfig,
    pub loss_uniform: LossKind,
    pub loss_balanced: LossKind,
    pub replica_refresh: ReplicaRefresh,
    pub augment: Augment,
    /// Standardize inputs with the training set's channel statistics.
    pub normalize: bool,
    pub backbone: BackboneKind,
    pub embed_dim: usize,
    pub mixup_alpha: f64,
    /// Apply mixup to the uniform branch of context-shift training.
    pub mixup_uniform: bool,
    pub crt_epochs: usize,
    pub seed: u64,
    /// Evaluate on the monitor set after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    /// The LeNet recipe for the MNIST-family benchmarks.
    fn default() -> Self {
        Self {
            epochs: 8,
            warmup_epochs: 1,
            freeze_aug_last_epochs: 1,
            batch_size: 128,
            delta: 0.8,
            bank_capacity: None,
            lambda: LambdaDist::Uniform { a: 0.0, b: 1.0 },
            lambda_per_sample: false,
            optimizer: SgdConfig {
                lr: 0.1,
                momentum: 0.6,
                weight_decay: 2e-3,
                schedule: LrSchedule::Cosine,
            },
            loss_uniform: LossKind::CrossEntropy,
            loss_balanced: LossKind::CrossEntropy,
            replica_refresh: ReplicaRefresh::Once,
            augment: Augment::None,
            normalize: false,
            backbone: BackboneKind::LeNet,
            embed_dim: 2,
            mixup_alpha: 1.0,
            mixup_uniform: false,
            crt_epochs: 4,
            seed: 0,
            eval_each_epoch: false,
        }
    }
}

impl TrainConfig {
    /// Fashion-LT variant of the LeNet recipe.
    pub fn fashion() -> Self {
        let mut c = Self::default();
        c.optimizer.momentum = 0.9;
        c.optimizer.weight_decay = 1e-3;
        c
    }

    /// Default recipe for a named benchmark.
    pub fn for_benchmark(name: BenchmarkName) -> Self {
        match name {
            BenchmarkName::MnistLt | BenchmarkName::CmnistLt => Self::default(),
            BenchmarkName::FashionLt => Self::fashion(),
            BenchmarkName::Cifar10Lt | BenchmarkName::Cifar100Lt => Self::cifar(),
        }
    }

    /// ResNet-32 recipe for CIFAR-LT.
    pub fn cifar() -> Self {
        Self {
            epochs: 200,
            warmup_epochs: 10,
            freeze_aug_last_epochs: 3,
            optimizer: SgdConfig {
                lr: 0.2,
                momentum: 0.9,
                weight_decay: 2e-4,
                schedule: LrSchedule::MultiStep {
                    milestones: vec![160, 180],
                    gamma: 0.1,
                },
            },
            augment: Augment::CropFlip { pad: 4 },
            backbone: BackboneKind::ResNet32,
            embed_dim: 64,
            crt_epochs: 10,
            ..Self::default()
        }
    }

    pub fn bank_capacity(&self) -> usize {
        self.bank_capacity.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return fail(format!("delta {} outside [0, 1]", self.delta));
        }
        if self.bank_capacity == Some(0) {
            return fail("bank_capacity must be positive".into());
        }
        if self.optimizer.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
            || !(0.0..1.0).contains(&self.optimizer.momentum)
            || self.optimizer.weight_decay < 0.0
        {
            return fail(format!("invalid optimizer settings {:?}", self.optimizer));
        }
        if self.mixup_alpha < 0.0 {
            return fail("mixup_alpha must be non-negative".into());
        }
        self.lambda.validate()
    }

    /// [`TrainConfig::validate`] plus the warm-up and plain-phase schedule of
    /// context-shift training.
    pub fn validate_csa(&self) -> Result<()> {
        self.validate()?;
        if self.warmup_epochs + self.freeze_aug_last_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} + freeze_aug_last_epochs {} exceed epochs {}",
                self.warmup_epochs, self.freeze_aug_last_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn backbone_spec(&self, set: &ImageSet) -> BackboneSpec {
        BackboneSpec {
            kind: self.backbone,
            in_channels: set.channels,
            height: set.height,
            width: set.width,
            embed_dim: self.embed_dim,
        }
    }

    /// Fresh model for `train`, with input statistics taken from it.
    pub fn init_model<T: Scalar>(&self, train: &ImageSet) -> DualBranchModel<T> {
        let normalizer = if self.normalize {
            let (mean, std) = train.channel_stats();
            Normalizer { mean, std }
        } else {
            Normalizer::identity(train.channels)
        };
        let mut rng = stream_rng(self.seed, streams::INIT);
        DualBranchModel::new(self.backbone_spec(train), train.num_classes, normalizer, &mut rng)
    }
}

/// Losses of one optimizer step; `total == loss_uniform + loss_balanced`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub loss_uniform: f64,
    pub loss_balanced: f64,
    pub total: f64,
    pub bank_ready: bool,
}

impl LossRecord {
    pub fn new(loss_uniform: f64, loss_balanced: f64, bank_ready: bool) -> Self {
        Self {
            loss_uniform,
            loss_balanced,
            total: loss_uniform + loss_balanced,
            bank_ready,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Augment,
    Plain,
    Uniform,
    Balanced,
    Mixup,
    Retrain,
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss_uniform: f64,
    pub loss_balanced: f64,
    pub loss_total: f64,
    pub bank_size: usize,
    pub overall: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Held-out set evaluated after each epoch when enabled.
#[derive(Debug, Clone, Copy)]
pub struct Monitor<'a> {
    pub test: &'a ImageSet,
    pub groups: &'a ShotGroups,
    pub head: HeadChoice,
}

/// A trained model with its logs.
#[derive(Debug, Clone)]
pub struct TrainRun<T> {
    pub model: DualBranchModel<T>,
    pub history: Vec<EpochRecord>,
    pub steps: Vec<LossRecord>,
    /// Generator positions at the end of training.
    pub rng_states: Vec<RngState>,
}

/// Images (channel-last, raw) and labels of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn gather(set: &ImageSet, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * set.image_len());
        for &i in indices {
            images.extend_from_slice(set.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| set.labels[i]).collect(),
        }
    }

    /// Gathers and applies the configured augmentation.
    pub fn gather_augmented<R: Rng + ?Sized>(set: &ImageSet, indices: &[usize], augment: Augment, rng: &mut R) -> Self {
        let mut b = Self::gather(set, indices);
        if let Augment::CropFlip { pad } = augment {
            let n = set.image_len();
            for img in b.images.chunks_exact_mut(n) {
                let out = crop_flip(img, set.height, set.width, set.channels, pad, rng);
                img.copy_from_slice(&out);
            }
        }
        b
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    Ok(lse - logits[label])
}

/// Mean cross-entropy against mixtures of two labels
/// (`weight * CE(a) + (1 - weight) * CE(b)` per row) and its gradient with
/// respect to the logits.
pub fn mixed_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels_a: &[usize],
    labels_b: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let b = logits.dim(0);
    let k = logits.dim(1);
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    let inv = T::one() / T::of(b as f64);
    for r in 0..b {
        let row = logits.outer(r);
        let w = weights[r];
        loss += w * cross_entropy(row, labels_a[r])?.as_f64();
        if w < 1.0 {
            loss += (1.0 - w) * cross_entropy(row, labels_b[r])?.as_f64();
        }
        let p = fitting_probability(row)?;
        let g = grad.outer_mut(r);
        for (gv, pv) in g.iter_mut().zip(&p) {
            *gv = *pv * inv;
        }
        g[labels_a[r]] -= T::of(w) * inv;
        g[labels_b[r]] -= T::of(1.0 - w) * inv;
    }
    Ok((loss / b as f64, grad))
}

/// Mean cross-entropy of a batch and its gradient with respect to the logits.
pub fn batch_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.dim(0) != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.dim(0),
            labels.len()
        )));
    }
    mixed_cross_entropy(logits, labels, labels, &vec![1.0; labels.len()])
}

/// `lambda * M * context + (1 - lambda * M) * target`, with the mask
/// broadcast over channels. Results are clamped to the interval spanned by
/// the two source pixels.
pub fn blend(target: &[f32], context: &ContextEntry, lambda: f32) -> Result<Vec<f32>> {
    if target.len() != context.image.len() || context.mask.len() * context.channels != target.len() {
        return Err(Error::Shape(format!(
            "target of {} values vs context {}x{}x{}",
            target.len(),
            context.height,
            context.width,
            context.channels
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let c = context.channels;
    Ok(target
        .iter()
        .zip(&context.image)
        .enumerate()
        .map(|(i, (&t, &x))| {
            let a = lambda * context.mask[i / c];
            (a * x + (1.0 - a) * t).clamp(t.min(x), t.max(x))
        })
        .collect())
}

/// Shuffled copy of `indices`.
fn shuffled(indices: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.shuffle(rng);
    v
}

fn monitor_metrics<T: Scalar>(model: &mut DualBranchModel<T>, monitor: Option<Monitor<'_>>) -> Result<Option<Metrics>> {
    monitor.map(|m| evaluate(model, m.test, m.groups, m.head)).transpose()
}

fn epoch_record(
    epoch: usize,
    phase: Phase,
    lr: f64,
    losses: &[LossRecord],
    bank: Option<&ContextBank>,
    metrics: Option<Metrics>,
) -> EpochRecord {
    let n = losses.len().max(1) as f64;
    let lu = losses.iter().map(|l| l.loss_uniform).sum::<f64>() / n;
    let lb = losses.iter().map(|l| l.loss_balanced).sum::<f64>() / n;
    EpochRecord {
        epoch,
        phase,
        lr,
        loss_uniform: lu,
        loss_balanced: lb,
        loss_total: lu + lb,
        bank_size: bank.map_or(0, |b| b.len()),
        overall: metrics.as_ref().map(|m| m.overall_acc),
        many: metrics.as_ref().and_then(|m| m.group_acc.many),
        medium: metrics.as_ref().and_then(|m| m.group_acc.medium),
        few: metrics.as_ref().and_then(|m| m.group_acc.few),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_closed_forms() {
        let u = cross_entropy(&[0.5f64; 10], 3).unwrap();
        assert!((u - 10f64.ln()).abs() < 1e-12);
        let mut one_hot = [0.0f64; 10];
        one_hot[2] = 1000.0;
        assert!(cross_entropy(&one_hot, 2).unwrap() < 1e-12);
        let v = cross_entropy(&[1.0f64, 0.0], 0).unwrap();
        assert!((v - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0f64, 0.0], 2).is_err());
    }

    #[test]
    fn batch_gradient_is_softmax_minus_onehot() {
        let z = Tensor::from_vec(&[2, 2], vec![0.0f64, 0.0, 1.0, 0.0]).unwrap();
        let (loss, g) = batch_cross_entropy(&z, &[0, 1]).unwrap();
        assert!((loss - 0.5 * (2f64.ln() + 1.0 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-12);
        assert!((g.data()[0] + 0.25).abs() < 1e-12);
        assert!((g.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn blend_endpoints() {
        let ctx = ContextEntry {
            image: vec![0.8, 0.8],
            mask: vec![1.0],
            height: 1,
            width: 1,
            channels: 2,
        };
        assert_eq!(blend(&[0.2, 0.3], &ctx, 0.0).unwrap(), vec![0.2, 0.3]);
        assert_eq!(blend(&[0.2, 0.3], &ctx, 1.0).unwrap(), vec![0.8, 0.8]);
        assert!((blend(&[0.2, 0.2], &ctx, 0.5).unwrap()[0] - 0.5).abs() < 1e-7);
        assert!(blend(&[0.2], &ctx, 0.5).is_err());
    }

    #[test]
    fn degenerate_lambda() {
        assert_eq!(draw_lambda(&LambdaDist::Uniform { a: 0.0, b: 0.0 }, 3).unwrap(), 0.0);
        assert_eq!(draw_lambda(&LambdaDist::Uniform { a: 1.0, b: 1.0 }, 3).unwrap(), 1.0);
        assert!(draw_lambda(&LambdaDist::Uniform { a: 0.5, b: 1.5 }, 3).is_err());
    }

    #[test]
    fn config_rejects_overlong_schedule() {
        let cfg = TrainConfig {
            warmup_epochs: 6,
            freeze_aug_last_epochs: 3,
            ..TrainConfig::default()
        };
        assert!(cfg.validate_csa().is_err() && cfg.validate().is_ok());
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::cifar().validate().is_ok());
    }
}
