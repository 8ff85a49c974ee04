use super::{dims4, Param, ParamGrads, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `[B, C, H, W]`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: Param::buffer(vec![T::zero(); channels]),
            running_var: Param::buffer(vec![T::one(); channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BatchNormCache<T>) {
        let (b, c, h, w) = dims4(x);
        let hw = h * w;
        let m = b * hw;
        let eps = T::of(self.eps);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    s += x.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
                mean[ch] = s / T::of(m as f64);
                let mut v = T::zero();
                for bi in 0..b {
                    for &xv in &x.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                        v += (xv - mean[ch]) * (xv - mean[ch]);
                    }
                }
                var[ch] = v / T::of(m as f64);
                let mom = T::of(self.momentum);
                let unbiased = if m > 1 {
                    var[ch] * T::of(m as f64 / (m - 1) as f64)
                } else {
                    var[ch]
                };
                self.running_mean.value[ch] = (T::one() - mom) * self.running_mean.value[ch] + mom * mean[ch];
                self.running_var.value[ch] = (T::one() - mom) * self.running_var.value[ch] + mom * unbiased;
            }
        } else {
            mean.copy_from_slice(&self.running_mean.value);
            var.copy_from_slice(&self.running_var.value);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for i in r {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = self.gamma.value[ch] * xh + self.beta.value[ch];
                }
            }
        }
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats: train,
            },
        )
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad: &Tensor<T>, mode: ParamGrads) -> Tensor<T> {
        let (b, c, h, w) = dims4(grad);
        let hw = h * w;
        let m = T::of((b * hw) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                    sum_dy[ch] += grad.data()[i];
                    sum_dy_xhat[ch] += grad.data()[i] * cache.xhat.data()[i];
                }
            }
        }
        if mode == ParamGrads::Accumulate {
            for ch in 0..c {
                self.gamma.grad[ch] += sum_dy_xhat[ch];
                self.beta.grad[ch] += sum_dy[ch];
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        for bi in 0..b {
            for ch in 0..c {
                let g = self.gamma.value[ch];
                let is = cache.inv_std[ch];
                for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                    dx.data_mut()[i] = if cache.batch_stats {
                        g * is / m * (m * grad.data()[i] - sum_dy[ch] - cache.xhat.data()[i] * sum_dy_xhat[ch])
                    } else {
                        g * is * grad.data()[i]
                    };
                }
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}
