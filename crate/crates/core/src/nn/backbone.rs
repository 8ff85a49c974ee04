//! Feature extractors split at the last convolutional stage.
//!
//! `body` maps an image batch to the final convolutional feature map (the
//! Grad-CAM target); `neck` maps that map to the feature vector consumed by
//! the classifier heads.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BasicBlock, Conv2d, Layer, LayerCache, Linear, MaxPool2d, ParamGrads, ParamVisitor, Sequential};
use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// LeNet-5 with a trailing linear projection to a low-dimensional
    /// embedding, for 28x28 inputs.
    LeNet,
    /// CIFAR ResNet-32 (3 stages x 5 basic blocks, 16/32/64 planes).
    ResNet32,
    /// Two 3x3 conv layers and a dense projection; used for gradient checks.
    Tiny,
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::LeNet => "lenet",
            BackboneKind::ResNet32 => "resnet32",
            BackboneKind::Tiny => "tiny",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "lenet" => Ok(BackboneKind::LeNet),
            "resnet32" => Ok(BackboneKind::ResNet32),
            "tiny" => Ok(BackboneKind::Tiny),
            other => Err(Error::invalid(format!(
                "unknown backbone {other:?} (expected lenet, resnet32 or tiny)"
            ))),
        }
    }
}

/// Shape information needed to build a backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Embedding width for `LeNet`/`Tiny`; ignored by `ResNet32` (fixed 64).
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub spec: BackboneSpec,
    pub body: Sequential<T>,
    pub neck: Sequential<T>,
    pub feature_dim: usize,
}

/// Forward caches of one extractor pass plus the Grad-CAM feature map.
#[derive(Debug, Clone)]
pub struct BackboneTrace<T> {
    body: Vec<LayerCache<T>>,
    neck: Vec<LayerCache<T>>,
    pub fmap: Tensor<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(spec: BackboneSpec, rng: &mut R) -> Self {
        match spec.kind {
            BackboneKind::LeNet => Self::lenet(spec, rng),
            BackboneKind::ResNet32 => Self::resnet32(spec, rng),
            BackboneKind::Tiny => Self::tiny(spec, rng),
        }
    }

    fn lenet<R: Rng + ?Sized>(spec: BackboneSpec, rng: &mut R) -> Self {
        let c1 = Conv2d::new(spec.in_channels, 6, 5, 1, 0, rng);
        let (h1, w1) = c1.output_hw(spec.height, spec.width);
        let c2 = Conv2d::new(6, 16, 5, 1, 0, rng);
        let (h2, w2) = c2.output_hw(h1 / 2, w1 / 2);
        let flat = 16 * (h2 / 2) * (w2 / 2);
        let body = Sequential::new(vec![
            Layer::Conv(c1),
            Layer::Relu,
            Layer::MaxPool(MaxPool2d { size: 2 }),
            Layer::Conv(c2),
            Layer::Relu,
        ]);
        let neck = Sequential::new(vec![
            Layer::MaxPool(MaxPool2d { size: 2 }),
            Layer::Flatten,
            Layer::Linear(Linear::new(flat, 120, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(120, 84, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(84, spec.embed_dim, rng)),
        ]);
        Self {
            spec,
            body,
            neck,
            feature_dim: spec.embed_dim,
        }
    }

    fn resnet32<R: Rng + ?Sized>(spec: BackboneSpec, rng: &mut R) -> Self {
        let mut layers = vec![
            Layer::Conv(Conv2d::new_he(spec.in_channels, 16, 3, 1, 1, rng)),
            Layer::BatchNorm(super::BatchNorm2d::new(16)),
            Layer::Relu,
        ];
        let mut in_planes = 16;
        for (stage, planes) in [16usize, 32, 64].into_iter().enumerate() {
            for block in 0..5 {
                let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                layers.push(Layer::Block(Box::new(BasicBlock::new(in_planes, planes, stride, rng))));
                in_planes = planes;
            }
        }
        Self {
            spec,
            body: Sequential::new(layers),
            neck: Sequential::new(vec![Layer::GlobalAvgPool]),
            feature_dim: 64,
        }
    }

    fn tiny<R: Rng + ?Sized>(spec: BackboneSpec, rng: &mut R) -> Self {
        let ch = 3;
        let body = Sequential::new(vec![
            Layer::Conv(Conv2d::new(spec.in_channels, ch, 3, 1, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, rng)),
            Layer::Relu,
        ]);
        let neck = Sequential::new(vec![
            Layer::Flatten,
            Layer::Linear(Linear::new(ch * spec.height * spec.width, spec.embed_dim, rng)),
        ]);
        Self {
            spec,
            body,
            neck,
            feature_dim: spec.embed_dim,
        }
    }

    /// `[B, C, H, W]` images to `[B, feature_dim]` features.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BackboneTrace<T>) {
        let (fmap, body) = self.body.forward(x, train);
        let (features, neck) = self.neck.forward(&fmap, train);
        (features, BackboneTrace { body, neck, fmap })
    }

    /// Neck-only forward from a feature map (no caches kept).
    pub fn neck_forward(&mut self, fmap: &Tensor<T>) -> Tensor<T> {
        self.neck.forward(fmap, false).0
    }

    pub fn backward(&mut self, trace: &BackboneTrace<T>, grad: &Tensor<T>, mode: ParamGrads) {
        if let Some(g) = self.neck.backward(&trace.neck, grad, mode, true) {
            self.body.backward(&trace.body, &g, mode, false);
        }
    }

    /// Gradient of the features with respect to the feature map, without
    /// touching any parameter gradient.
    pub fn fmap_grad(&mut self, trace: &BackboneTrace<T>, grad: &Tensor<T>) -> Tensor<T> {
        self.neck
            .backward(&trace.neck, grad, ParamGrads::Skip, true)
            .expect("input gradient requested")
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.body.visit_params(&format!("{prefix}.body"), f);
        self.neck.visit_params(&format!("{prefix}.neck"), f);
    }
}
