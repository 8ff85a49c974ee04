use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense and
/// convolution layers.
pub(crate) fn uniform_fan_in<T: Scalar, R: Rng + ?Sized>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

/// He-normal with fan-out scaling, used for residual networks.
pub(crate) fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(n: usize, fan_out: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan_out as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| T::of(dist.sample(rng))).collect()
}
