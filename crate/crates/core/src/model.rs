//! Shared feature extractor with two linear classifier heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Backbone, BackboneSpec, BackboneTrace, Linear, Param, ParamGrads, ParamVisitor, Sgd};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Uniform,
    Balanced,
}

/// Per-channel affine input normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Which parameter groups an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepGroups {
    pub extractor: bool,
    pub uniform: bool,
    pub balanced: bool,
}

impl StepGroups {
    pub const ALL: Self = Self {
        extractor: true,
        uniform: true,
        balanced: true,
    };
    pub const UNIFORM_BRANCH: Self = Self {
        extractor: true,
        uniform: true,
        balanced: false,
    };
    pub const BALANCED_BRANCH: Self = Self {
        extractor: true,
        uniform: false,
        balanced: true,
    };
}

/// `f^u(x) = psi_u(phi(x))`, `f^b(x) = psi_b(phi(x))`.
#[derive(Debug, Clone)]
pub struct DualBranchModel<T> {
    pub normalizer: Normalizer,
    pub extractor: Backbone<T>,
    pub head_uniform: Linear<T>,
    pub head_balanced: Linear<T>,
    pub num_classes: usize,
}

/// Extractor output for one batch together with its backward caches.
#[derive(Debug, Clone)]
pub struct FeaturePass<T> {
    pub features: Tensor<T>,
    pub trace: BackboneTrace<T>,
}

impl<T: Scalar> DualBranchModel<T> {
    pub fn new<R: Rng + ?Sized>(spec: BackboneSpec, num_classes: usize, normalizer: Normalizer, rng: &mut R) -> Self {
        let extractor = Backbone::new(spec, rng);
        let d = extractor.feature_dim;
        let head_uniform = Linear::new(d, num_classes, rng);
        let head_balanced = Linear::new(d, num_classes, rng);
        Self {
            normalizer,
            extractor,
            head_uniform,
            head_balanced,
            num_classes,
        }
    }

    pub fn spec(&self) -> BackboneSpec {
        self.extractor.spec
    }

    pub fn head(&self, head: Head) -> &Linear<T> {
        match head {
            Head::Uniform => &self.head_uniform,
            Head::Balanced => &self.head_balanced,
        }
    }

    pub fn head_mut(&mut self, head: Head) -> &mut Linear<T> {
        match head {
            Head::Uniform => &mut self.head_uniform,
            Head::Balanced => &mut self.head_balanced,
        }
    }

    /// Channel-last raw images (`n x H x W x C`, values in `[0, 1]`) to a
    /// normalized `[n, C, H, W]` tensor.
    pub fn prepare(&self, images: &[f32], n: usize) -> Result<Tensor<T>> {
        let s = self.extractor.spec;
        let (c, hw) = (s.in_channels, s.height * s.width);
        if images.len() != n * hw * c {
            return Err(Error::Shape(format!(
                "{} values for {n} images of {}x{}x{c}",
                images.len(),
                s.height,
                s.width
            )));
        }
        let scale: Vec<f64> = self.normalizer.std.iter().map(|s| 1.0 / s).collect();
        let mut out = vec![T::zero(); images.len()];
        for i in 0..n {
            let src = &images[i * hw * c..(i + 1) * hw * c];
            let dst = &mut out[i * hw * c..(i + 1) * hw * c];
            for p in 0..hw {
                for ch in 0..c {
                    dst[ch * hw + p] = T::of((src[p * c + ch] as f64 - self.normalizer.mean[ch]) * scale[ch]);
                }
            }
        }
        Tensor::from_vec(&[n, c, s.height, s.width], out)
    }

    pub fn features(&mut self, x: &Tensor<T>, train: bool) -> FeaturePass<T> {
        let (features, trace) = self.extractor.forward(x, train);
        FeaturePass { features, trace }
    }

    pub fn logits(&self, head: Head, features: &Tensor<T>) -> Tensor<T> {
        self.head(head).forward(features)
    }

    /// Inference logits for a batch of raw images.
    pub fn predict_logits(&mut self, images: &[f32], n: usize, head: Head) -> Result<Tensor<T>> {
        let x = self.prepare(images, n)?;
        let pass = self.features(&x, false);
        Ok(self.logits(head, &pass.features))
    }

    /// Backpropagates `dlogits` through a head and the extractor,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, head: Head, pass: &FeaturePass<T>, dlogits: &Tensor<T>) {
        let dfeat = self
            .head_mut(head)
            .backward(&pass.features, dlogits, ParamGrads::Accumulate, true)
            .expect("input gradient requested");
        self.extractor.backward(&pass.trace, &dfeat, ParamGrads::Accumulate);
    }

    /// Gradient of the feature map for `dlogits` on `head`; no parameter
    /// gradient is touched.
    pub fn fmap_grad(&mut self, head: Head, pass: &FeaturePass<T>, dlogits: &Tensor<T>) -> Tensor<T> {
        let dfeat = self
            .head_mut(head)
            .backward(&pass.features, dlogits, ParamGrads::Skip, true)
            .expect("input gradient requested");
        self.extractor.fmap_grad(&pass.trace, &dfeat)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.extractor.visit_params("extractor", f);
        self.head_uniform.visit_params("head_uniform", f);
        self.head_balanced.visit_params("head_balanced", f);
    }

    pub fn visit_group(&mut self, groups: StepGroups, f: &mut ParamVisitor<'_, T>) {
        if groups.extractor {
            self.extractor.visit_params("extractor", f);
        }
        if groups.uniform {
            self.head_uniform.visit_params("head_uniform", f);
        }
        if groups.balanced {
            self.head_balanced.visit_params("head_balanced", f);
        }
    }

    /// SGD update of the selected groups; other groups keep their values,
    /// momentum and (cleared) gradients untouched.
    pub fn step(&mut self, sgd: &Sgd, groups: StepGroups) {
        self.visit_group(groups, &mut |_, p| sgd.step_param(p));
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Named snapshot of every parameter and buffer value.
    pub fn named_values(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    /// Named gradients of trainable parameters.
    pub fn named_grads(&mut self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p: &mut Param<T>| {
            if p.trainable {
                out.push((name.to_string(), p.grad.clone()))
            }
        });
        out
    }

    pub fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BackboneKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prepare_transposes_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = BackboneSpec {
            kind: BackboneKind::Tiny,
            in_channels: 2,
            height: 1,
            width: 2,
            embed_dim: 2,
        };
        let norm = Normalizer {
            mean: vec![0.5, 0.0],
            std: vec![0.5, 2.0],
        };
        let model = DualBranchModel::<f64>::new(spec, 3, norm, &mut rng);
        let x = model.prepare(&[1.0, 2.0, 0.0, 4.0], 1).unwrap();
        assert_eq!(x.shape(), &[1, 2, 1, 2]);
        assert_eq!(x.data(), &[1.0, -1.0, 1.0, 2.0]);
        assert!(model.prepare(&[0.0; 3], 1).is_err());
    }
}
