use rand::Rng;

use super::{init, Param, ParamGrads, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dense layer `y = x W^T + b` over `[B, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(init::uniform_fan_in(in_features * out_features, in_features, rng)),
            bias: Param::new(init::uniform_fan_in(out_features, in_features, rng)),
        }
    }

    /// Redraws weights and bias in place; gradient and momentum state are cleared.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        *self = Self::new(self.in_features, self.out_features, rng);
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let b = x.dim(0);
        assert_eq!(x.len(), b * self.in_features, "linear input width");
        let mut y = Tensor::zeros(&[b, self.out_features]);
        for row in 0..b {
            y.outer_mut(row).copy_from_slice(&self.bias.value);
        }
        T::gemm(
            b,
            self.in_features,
            self.out_features,
            T::one(),
            x.data(),
            (self.in_features as isize, 1),
            &self.weight.value,
            (1, self.in_features as isize),
            T::one(),
            y.data_mut(),
            (self.out_features as isize, 1),
        );
        y
    }

    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        grad: &Tensor<T>,
        mode: ParamGrads,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let b = x.dim(0);
        let (fin, fout) = (self.in_features, self.out_features);
        if mode == ParamGrads::Accumulate {
            T::gemm(
                fout,
                b,
                fin,
                T::one(),
                grad.data(),
                (1, fout as isize),
                x.data(),
                (fin as isize, 1),
                T::one(),
                &mut self.weight.grad,
                (fin as isize, 1),
            );
            for row in 0..b {
                for (g, &d) in self.bias.grad.iter_mut().zip(grad.outer(row)) {
                    *g += d;
                }
            }
        }
        input_grad.then(|| {
            let mut dx = Tensor::zeros(&[b, fin]);
            T::gemm(
                b,
                fout,
                fin,
                T::one(),
                grad.data(),
                (fout as isize, 1),
                &self.weight.value,
                (fin as isize, 1),
                T::zero(),
                dx.data_mut(),
                (fin as isize, 1),
            );
            dx
        })
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}
