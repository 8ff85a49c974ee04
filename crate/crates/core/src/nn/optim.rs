use serde::{Deserialize, Serialize};

use super::Param;
use crate::scalar::Scalar;

/// Learning-rate schedule, evaluated at fractional epoch progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate to zero over the whole run, advanced
    /// every iteration.
    Cosine,
    /// Multiply by `gamma` at each milestone epoch.
    MultiStep {
        milestones: Vec<usize>,
        gamma: f64,
    },
}

impl LrSchedule {
    /// Rate for iteration `iter` of `iters_per_epoch` within `epoch` (0-based)
    /// out of `total_epochs`.
    pub fn rate(&self, base: f64, epoch: usize, iter: usize, iters_per_epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let total = (total_epochs * iters_per_epoch).max(1) as f64;
                let t = (epoch * iters_per_epoch + iter) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t / total).cos())
            }
            LrSchedule::MultiStep { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * gamma.powi(passed as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

/// Heavy-ball SGD with coupled L2 weight decay:
/// `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    pub lr: f64,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        let lr = config.lr;
        Self { config, lr }
    }

    pub fn set_progress(&mut self, epoch: usize, iter: usize, iters_per_epoch: usize, total_epochs: usize) {
        self.lr = self
            .config
            .schedule
            .rate(self.config.lr, epoch, iter, iters_per_epoch, total_epochs);
    }

    /// Updates one trainable parameter and clears its gradient.
    pub fn step_param<T: Scalar>(&self, p: &mut Param<T>) {
        if !p.trainable {
            return;
        }
        let lr = T::of(self.lr);
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        for ((w, g), v) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(p.velocity.iter_mut()) {
            let d = *g + wd * *w;
            *v = mu * *v + d;
            *w -= lr * *v;
            *g = T::zero();
        }
    }
}
