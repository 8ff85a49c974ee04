#![allow(dead_code)]

use std::path::PathBuf;

use ctxshift::data::ImageSet;
use ctxshift::nn::BackboneKind;
use ctxshift::training::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Images where class `k` brightens the `k`-th horizontal band, plus noise.
pub fn banded(counts: &[usize], h: usize, w: usize, channels: usize, seed: u64) -> ImageSet {
    let k = counts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for y in 0..h {
                for _ in 0..w * channels {
                    let on = y * k / h == class;
                    let base = if on { 0.7 } else { 0.0 };
                    images.push(base + 0.3 * rng.random::<f32>());
                }
            }
            labels.push(class);
        }
    }
    ImageSet::new(h, w, channels, k, images, labels).unwrap()
}

/// One pixel per image; only the labels matter.
pub fn labels_only(counts: &[usize]) -> ImageSet {
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    ImageSet::new(1, 1, 1, counts.len(), vec![0.0; labels.len()], labels).unwrap()
}

/// Small enough for f64 gradient checks and second-scale training runs.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        freeze_aug_last_epochs: 1,
        batch_size: 8,
        delta: 0.2,
        backbone: BackboneKind::Tiny,
        embed_dim: 4,
        crt_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
