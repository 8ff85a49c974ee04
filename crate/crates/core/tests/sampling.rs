mod common;

use ctxshift::data::histogram;
use ctxshift::sampling::{build_balanced_replica, class_sampling_probs, draw_indices, gamma_to_q, SamplerSpec};
use proptest::prelude::*;

const COUNTS: [usize; 10] = [5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50];

proptest! {
    #[test]
    fn probabilities_form_a_distribution(
        counts in prop::collection::vec(1usize..10_000, 1..50),
        q in 0.0f64..=1.0,
    ) {
        let p = class_sampling_probs(&counts, q).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0));
        let total: f64 = counts.iter().map(|&n| (n as f64).powf(q)).sum();
        for (k, &n) in counts.iter().enumerate() {
            prop_assert!((p[k] - (n as f64).powf(q) / total).abs() <= 1e-12);
        }
    }

    #[test]
    fn lower_q_moves_mass_to_the_tail(q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = class_sampling_probs(&COUNTS, lo).unwrap();
        let b = class_sampling_probs(&COUNTS, hi).unwrap();
        prop_assert!(a[9] >= b[9] - 1e-15);
        prop_assert!(a[0] <= b[0] + 1e-15);
    }
}

#[test]
fn extreme_exponents() {
    let p1 = class_sampling_probs(&COUNTS, 1.0).unwrap();
    let n: usize = COUNTS.iter().sum();
    for (k, &c) in COUNTS.iter().enumerate() {
        assert!((p1[k] - c as f64 / n as f64).abs() < 1e-15);
    }
    assert!(class_sampling_probs(&COUNTS, 0.0)
        .unwrap()
        .iter()
        .all(|&v| (v - 0.1).abs() < 1e-15));
    assert_eq!(gamma_to_q(1.0).unwrap(), 0.0);
    assert_eq!(gamma_to_q(0.0).unwrap(), 1.0);
    assert!(gamma_to_q(1.5).is_err());
    assert!(class_sampling_probs(&COUNTS, -0.1).is_err());
    assert!(class_sampling_probs(&[3, 0], 0.5).is_err());
    assert!(class_sampling_probs(&[], 0.5).is_err());
}

/// Expected L1 of an N-draw multinomial histogram: sum of `E|p_hat - p|`,
/// normal approximation.
fn expected_l1(probs: &[f64], n: f64) -> f64 {
    probs
        .iter()
        .map(|p| (2.0 * p * (1.0 - p) / (std::f64::consts::PI * n)).sqrt())
        .sum()
}

#[test]
fn empirical_class_frequencies_match() {
    let set = common::labels_only(&COUNTS);
    let draws = 100_000;
    let runs = 20;
    for q in [0.0, 0.5, 1.0] {
        let spec = SamplerSpec::new(&COUNTS, q).unwrap();
        let mut total = 0.0;
        for seed in 0..runs {
            let idx = draw_indices(&set, &spec, draws, seed).unwrap();
            let labels: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
            let h = histogram(&labels, 10);
            total += h
                .iter()
                .zip(&spec.class_probs)
                .map(|(&c, &p)| (c as f64 / draws as f64 - p).abs())
                .sum::<f64>();
        }
        let mean = total / runs as f64;
        let noise = expected_l1(&spec.class_probs, draws as f64);
        assert!(mean < 0.01, "q={q}: mean L1 {mean}");
        assert!(
            (mean / noise - 1.0).abs() < 0.1,
            "q={q}: mean L1 {mean} vs pure noise {noise}"
        );
    }
}

#[test]
fn draws_are_deterministic_per_seed() {
    let set = common::labels_only(&COUNTS);
    let spec = SamplerSpec::balanced(&COUNTS).unwrap();
    let a = draw_indices(&set, &spec, 500, 1).unwrap();
    assert_eq!(a, draw_indices(&set, &spec, 500, 1).unwrap());
    assert_ne!(a, draw_indices(&set, &spec, 500, 2).unwrap());
}

#[test]
fn sampler_and_dataset_must_agree() {
    let set = common::labels_only(&[4, 4, 4]);
    let spec = SamplerSpec::uniform(&[4, 4]).unwrap();
    assert!(draw_indices(&set, &spec, 1, 0).is_err());
}

#[test]
fn balanced_replica_is_exactly_balanced() {
    let set = common::labels_only(&COUNTS);
    let n = set.len();
    let replica = build_balanced_replica(&set, 3);
    assert_eq!(replica.len(), n);
    let labels: Vec<usize> = replica.iter().map(|&i| set.labels[i]).collect();
    let h = histogram(&labels, 10);
    for (k, &c) in h.iter().enumerate() {
        assert_eq!(c, n / 10 + usize::from(k < n % 10));
    }
    // Classes large enough are drawn without replacement.
    for k in 0..10 {
        let mut picked: Vec<usize> = replica.iter().copied().filter(|&i| set.labels[i] == k).collect();
        if COUNTS[k] >= h[k] {
            picked.sort_unstable();
            picked.dedup();
            assert_eq!(picked.len(), h[k], "class {k}");
        }
    }
    assert_eq!(replica, build_balanced_replica(&set, 3));
    assert_ne!(replica, build_balanced_replica(&set, 4));
}
