//! Class-aware sampling between instance-uniform (`q = 1`) and
//! class-balanced (`q = 0`).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// `p_k = n_k^q / sum_j n_j^q`.
pub fn class_sampling_probs(counts: &[usize], q: f64) -> Result<Vec<f64>> {
    if counts.is_empty() {
        return Err(Error::invalid("no classes to sample from"));
    }
    if counts.contains(&0) {
        return Err(Error::invalid("every class needs at least one sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("sampling exponent q={q} outside [0, 1]")));
    }
    let mass: Vec<f64> = counts.iter().map(|&n| (n as f64).powf(q)).collect();
    let total: f64 = mass.iter().sum();
    Ok(mass.into_iter().map(|m| m / total).collect())
}

/// Per-sample weight `n_y^-gamma` puts mass `n_k^(1-gamma)` on class `k`.
pub fn gamma_to_q(gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma={gamma} outside [0, 1]")));
    }
    Ok(1.0 - gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub q: f64,
    pub gamma: f64,
    pub class_probs: Vec<f64>,
}

impl SamplerSpec {
    pub fn new(counts: &[usize], q: f64) -> Result<Self> {
        Ok(Self {
            q,
            gamma: 1.0 - q,
            class_probs: class_sampling_probs(counts, q)?,
        })
    }

    pub fn from_gamma(counts: &[usize], gamma: f64) -> Result<Self> {
        Self::new(counts, gamma_to_q(gamma)?)
    }

    pub fn uniform(counts: &[usize]) -> Result<Self> {
        Self::new(counts, 1.0)
    }

    pub fn balanced(counts: &[usize]) -> Result<Self> {
        Self::new(counts, 0.0)
    }
}

/// Two-stage draw: a class from `spec.class_probs`, then one of its
/// instances uniformly.
pub fn draw_indices(dataset: &ImageSet, spec: &SamplerSpec, count: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = stream_rng(seed, 0);
    draw_indices_with(dataset, spec, count, &mut rng)
}

pub fn draw_indices_with<R: Rng + ?Sized>(
    dataset: &ImageSet,
    spec: &SamplerSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let by_class = dataset.indices_by_class();
    if spec.class_probs.len() != by_class.len() {
        return Err(Error::invalid(format!(
            "sampler has {} classes, dataset has {}",
            spec.class_probs.len(),
            by_class.len()
        )));
    }
    if let Some(k) = (0..by_class.len()).find(|&k| by_class[k].is_empty() && spec.class_probs[k] > 0.0) {
        return Err(Error::invalid(format!("class {k} has sampling mass but no samples")));
    }
    let classes = WeightedIndex::new(&spec.class_probs).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..count)
        .map(|_| {
            let pool = &by_class[classes.sample(rng)];
            pool[rng.random_range(0..pool.len())]
        })
        .collect())
}

/// A class-balanced resampling of the whole dataset: `N` indices with
/// `floor(N/K)` per class (the first `N mod K` classes take one more).
/// Classes with enough samples are drawn without replacement, the rest
/// with replacement. The result is shuffled.
pub fn build_balanced_replica(dataset: &ImageSet, seed: u64) -> Vec<usize> {
    let mut rng = stream_rng(seed, 0);
    build_balanced_replica_with(dataset, &mut rng)
}

pub fn build_balanced_replica_with<R: Rng + ?Sized>(dataset: &ImageSet, rng: &mut R) -> Vec<usize> {
    let by_class = dataset.indices_by_class();
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|p| !p.is_empty()).collect();
    let n = dataset.len();
    let k = present.len();
    let mut out = Vec::with_capacity(n);
    for (i, pool) in present.into_iter().enumerate() {
        let quota = n / k + usize::from(i < n % k);
        if quota <= pool.len() {
            out.extend(index::sample(rng, pool.len(), quota).into_iter().map(|j| pool[j]));
        } else {
            out.extend((0..quota).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }
    out.shuffle(rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_probabilities() {
        assert_eq!(class_sampling_probs(&[5000, 50], 0.0).unwrap(), vec![0.5, 0.5]);
        let p = class_sampling_probs(&[5000, 50], 1.0).unwrap();
        assert!((p[0] - 5000.0 / 5050.0).abs() < 1e-15);
        assert!(class_sampling_probs(&[], 0.5).is_err());
        assert!(gamma_to_q(1.5).is_err());
    }

    #[test]
    fn replica_handles_imbalance() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let set = ImageSet::new(1, 1, 1, 2, vec![0.0; 100], labels).unwrap();
        let rep = build_balanced_replica(&set, 3);
        let hist = crate::data::histogram(&rep.iter().map(|&i| set.labels[i]).collect::<Vec<_>>(), 2);
        assert_eq!(hist, vec![50, 50]);
    }
}
