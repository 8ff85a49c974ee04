//! Long-tail training sets carved from balanced sources.

mod cache;
mod cmnist;

pub use cache::{
    build_benchmark, cache_root, data_root, load_or_build, Benchmark, BenchmarkName, BenchmarkSpec, CacheStatus,
    Manifest, CACHE_ENV, DATA_ENV,
};
pub use cmnist::{build_cmnist_lt, colorize, colorize_test_set, CmnistRecord, ColorPalette, FlipRecord};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{histogram, ImageSet};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Exponential,
    Explicit,
}

/// Samples per class, head first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub counts: Vec<usize>,
    pub rho: f64,
    pub kind: ProfileKind,
}

impl ClassProfile {
    /// Profile with arbitrary positive counts; `rho` is recomputed.
    pub fn explicit(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::invalid("class counts must be non-empty and positive"));
        }
        let max = *counts.iter().max().expect("non-empty");
        let min = *counts.iter().min().expect("non-empty");
        Ok(Self {
            counts,
            rho: max as f64 / min as f64,
            kind: ProfileKind::Explicit,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Exponentially decaying class sizes: `n_k = round(n_max * rho^(-k/(K-1)))`.
pub fn build_longtail_profile(num_classes: usize, n_max: usize, rho: f64) -> Result<ClassProfile> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    if !rho.is_finite() || rho < 1.0 {
        return Err(Error::invalid(format!("imbalance ratio must be >= 1, got {rho}")));
    }
    if (n_max as f64) / rho < 1.0 {
        return Err(Error::invalid(format!(
            "n_max {n_max} / rho {rho} < 1 leaves the tail class empty"
        )));
    }
    let last = (num_classes - 1) as f64;
    let counts = (0..num_classes)
        .map(|k| (n_max as f64 * rho.powf(-(k as f64) / last)).round() as usize)
        .collect();
    Ok(ClassProfile {
        counts,
        rho,
        kind: ProfileKind::Exponential,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotGroup {
    Many,
    Medium,
    Few,
}

impl ShotGroup {
    pub const ALL: [ShotGroup; 3] = [ShotGroup::Many, ShotGroup::Medium, ShotGroup::Few];

    pub fn as_str(self) -> &'static str {
        match self {
            ShotGroup::Many => "many",
            ShotGroup::Medium => "medium",
            ShotGroup::Few => "few",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ShotRule {
    Thresholds {
        many: usize,
        few: usize,
    },
    /// Top and bottom `floor(K/3)` classes by count; used when the
    /// thresholds leave a group empty.
    Terciles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotGroups {
    pub groups: Vec<ShotGroup>,
    pub rule: ShotRule,
}

impl ShotGroups {
    pub fn of(&self, class: usize) -> ShotGroup {
        self.groups[class]
    }

    pub fn members(&self, group: ShotGroup) -> Vec<usize> {
        (0..self.groups.len()).filter(|&k| self.groups[k] == group).collect()
    }
}

/// Many if `count > many`, few if `count < few`, medium otherwise. When
/// that leaves a group empty on a non-uniform profile, falls back to
/// frequency terciles.
pub fn assign_shot_groups(profile: &ClassProfile, many: usize, few: usize) -> ShotGroups {
    let counts = &profile.counts;
    let groups: Vec<ShotGroup> = counts
        .iter()
        .map(|&c| {
            if c > many {
                ShotGroup::Many
            } else if c < few {
                ShotGroup::Few
            } else {
                ShotGroup::Medium
            }
        })
        .collect();
    let uniform = counts.iter().all(|&c| c == counts[0]);
    let degenerate = ShotGroup::ALL.iter().any(|g| !groups.contains(g));
    if uniform || !degenerate || counts.len() < 3 {
        return ShotGroups {
            groups,
            rule: ShotRule::Thresholds { many, few },
        };
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let third = counts.len() / 3;
    let mut groups = vec![ShotGroup::Medium; counts.len()];
    for &k in &order[..third] {
        groups[k] = ShotGroup::Many;
    }
    for &k in &order[counts.len() - third..] {
        groups[k] = ShotGroup::Few;
    }
    ShotGroups {
        groups,
        rule: ShotRule::Terciles,
    }
}

/// A long-tail training set with its construction metadata.
#[derive(Debug, Clone)]
pub struct LongTailDataset {
    pub name: String,
    pub images: ImageSet,
    pub profile: ClassProfile,
    pub shot_groups: ShotGroups,
    pub seed: u64,
    /// Position of every sample in the source training split.
    pub source_indices: Vec<usize>,
    /// Present for CMNIST-LT.
    pub cmnist: Option<CmnistRecord>,
}

impl LongTailDataset {
    pub fn labels(&self) -> &[usize] {
        &self.images.labels
    }

    /// Labels before any label noise was injected.
    pub fn clean_labels(&self) -> &[usize] {
        match &self.cmnist {
            Some(rec) => &rec.clean_labels,
            None => &self.images.labels,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.images.num_classes
    }

    /// Observed label histogram.
    pub fn class_counts(&self) -> Vec<usize> {
        self.images.class_histogram()
    }
}

/// Per class, draws `profile.counts[k]` distinct samples of the source.
/// Output is ordered by source index.
pub fn subsample_dataset(source: &ImageSet, profile: &ClassProfile, seed: u64) -> Result<LongTailDataset> {
    if profile.num_classes() != source.num_classes {
        return Err(Error::invalid(format!(
            "profile has {} classes, source has {}",
            profile.num_classes(),
            source.num_classes
        )));
    }
    let by_class = source.indices_by_class();
    let mut rng = stream_rng(seed, streams::SUBSAMPLE);
    let mut picked = Vec::with_capacity(profile.total());
    for (class, (&need, pool)) in profile.counts.iter().zip(&by_class).enumerate() {
        if pool.len() < need {
            return Err(Error::InsufficientSamples {
                class,
                needed: need,
                available: pool.len(),
            });
        }
        picked.extend(index::sample(&mut rng, pool.len(), need).into_iter().map(|i| pool[i]));
    }
    picked.sort_unstable();
    let images = source.select(&picked);
    debug_assert_eq!(histogram(&images.labels, images.num_classes), profile.counts);
    Ok(LongTailDataset {
        name: String::from("longtail"),
        images,
        profile: profile.clone(),
        shot_groups: assign_shot_groups(profile, 100, 20),
        seed,
        source_indices: picked,
        cmnist: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_profile_endpoints() {
        let p = build_longtail_profile(10, 5000, 100.0).unwrap();
        assert_eq!(p.counts[0], 5000);
        assert_eq!(p.counts[9], 50);
        assert_eq!(build_longtail_profile(100, 500, 100.0).unwrap().counts[99], 5);
        assert_eq!(build_longtail_profile(2, 100, 1.0).unwrap().counts, vec![100, 100]);
    }

    #[test]
    fn profile_rejects_empty_tail() {
        assert!(build_longtail_profile(10, 50, 100.0).is_err());
        assert!(build_longtail_profile(10, 5000, 0.5).is_err());
        assert!(build_longtail_profile(1, 5000, 10.0).is_err());
    }

    #[test]
    fn thresholds_then_tercile_fallback() {
        let cifar = build_longtail_profile(100, 500, 100.0).unwrap();
        let g = assign_shot_groups(&cifar, 100, 20);
        assert_eq!(g.rule, ShotRule::Thresholds { many: 100, few: 20 });
        assert_eq!(g.of(0), ShotGroup::Many);
        assert_eq!(g.of(99), ShotGroup::Few);

        let flat = ClassProfile::explicit(vec![50; 10]).unwrap();
        let g = assign_shot_groups(&flat, 100, 20);
        assert!(g.groups.iter().all(|&s| s == ShotGroup::Medium));

        let mnist = build_longtail_profile(10, 5000, 100.0).unwrap();
        let g = assign_shot_groups(&mnist, 100, 20);
        assert_eq!(g.rule, ShotRule::Terciles);
        assert_eq!(g.members(ShotGroup::Many), vec![0, 1, 2]);
        assert_eq!(g.members(ShotGroup::Medium), vec![3, 4, 5, 6]);
        assert_eq!(g.members(ShotGroup::Few), vec![7, 8, 9]);
    }

    #[test]
    fn subsample_reports_short_class() {
        let src = ImageSet::new(1, 1, 1, 2, vec![0.0; 4], vec![0, 0, 0, 1]).unwrap();
        let profile = ClassProfile::explicit(vec![2, 2]).unwrap();
        match subsample_dataset(&src, &profile, 0) {
            Err(Error::InsufficientSamples { class, .. }) => assert_eq!(class, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
