//! Minimal CPU network layers with explicit forward caches.
//!
//! Every layer's `forward` returns its output together with a cache value;
//! `backward` consumes that cache. Caches are owned values, so several
//! forward passes through the same parameters can be alive at once (the
//! dual-branch step runs the extractor on two batches before a single
//! backward).

mod backbone;
mod conv;
mod init;
mod linear;
mod norm;
mod optim;
mod pool;
mod residual;

pub use backbone::{Backbone, BackboneKind, BackboneSpec, BackboneTrace};
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use optim::{LrSchedule, Sgd, SgdConfig};
pub use pool::MaxPool2d;
pub use residual::BasicBlock;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A learnable (or running-statistic) buffer with its gradient and
/// momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub velocity: Vec<T>,
    /// Running statistics are stored as non-trainable params so they are
    /// checkpointed alongside the weights but never stepped.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![T::zero(); n],
            velocity: vec![T::zero(); n],
            trainable: true,
        }
    }

    pub fn buffer(value: Vec<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Whether a backward pass accumulates parameter gradients or only
/// propagates the input gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGrads {
    Accumulate,
    Skip,
}

/// Visitor over named parameters.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu,
    MaxPool(MaxPool2d),
    GlobalAvgPool,
    Flatten,
    Linear(Linear<T>),
    Block(Box<BasicBlock<T>>),
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Conv(conv::ConvCache<T>),
    BatchNorm(norm::BatchNormCache<T>),
    Relu(Tensor<T>),
    MaxPool(pool::MaxPoolCache),
    GlobalAvgPool(Vec<usize>),
    Flatten(Vec<usize>),
    Linear(Tensor<T>),
    Block(Box<residual::BlockCache<T>>),
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, LayerCache<T>) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward(x);
                (y, LayerCache::Conv(cache))
            }
            Layer::BatchNorm(bn) => {
                let (y, cache) = bn.forward(x, train);
                (y, LayerCache::BatchNorm(cache))
            }
            Layer::Relu => {
                let y = x.map(|v| v.max(T::zero()));
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::MaxPool(p) => {
                let (y, cache) = p.forward(x);
                (y, LayerCache::MaxPool(cache))
            }
            Layer::GlobalAvgPool => {
                let (b, c, h, w) = dims4(x);
                let hw = h * w;
                let mut out = Tensor::zeros(&[b, c]);
                let scale = T::one() / T::of(hw as f64);
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o = x.data()[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * scale;
                }
                (out, LayerCache::GlobalAvgPool(x.shape().to_vec()))
            }
            Layer::Flatten => {
                let b = x.dim(0);
                let rest = x.len() / b.max(1);
                let y = x.clone().reshape(&[b, rest]).expect("flatten");
                (y, LayerCache::Flatten(x.shape().to_vec()))
            }
            Layer::Linear(l) => (l.forward(x), LayerCache::Linear(x.clone())),
            Layer::Block(blk) => {
                let (y, cache) = blk.forward(x, train);
                (y, LayerCache::Block(Box::new(cache)))
            }
        }
    }

    pub fn backward(
        &mut self,
        cache: &LayerCache<T>,
        grad: &Tensor<T>,
        mode: ParamGrads,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cc)) => c.backward(cc, grad, mode, input_grad),
            (Layer::BatchNorm(bn), LayerCache::BatchNorm(bc)) => Some(bn.backward(bc, grad, mode)),
            (Layer::Relu, LayerCache::Relu(out)) => {
                let mut g = grad.clone();
                for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
                    if o <= T::zero() {
                        *gv = T::zero();
                    }
                }
                Some(g)
            }
            (Layer::MaxPool(p), LayerCache::MaxPool(pc)) => Some(p.backward(pc, grad)),
            (Layer::GlobalAvgPool, LayerCache::GlobalAvgPool(shape)) => {
                let hw = shape[2] * shape[3];
                let scale = T::one() / T::of(hw as f64);
                let mut dx = Tensor::zeros(shape);
                for (i, &g) in grad.data().iter().enumerate() {
                    dx.data_mut()[i * hw..(i + 1) * hw]
                        .iter_mut()
                        .for_each(|d| *d = g * scale);
                }
                Some(dx)
            }
            (Layer::Flatten, LayerCache::Flatten(shape)) => Some(grad.clone().reshape(shape).expect("unflatten")),
            (Layer::Linear(l), LayerCache::Linear(x)) => l.backward(x, grad, mode, input_grad),
            (Layer::Block(blk), LayerCache::Block(bc)) => Some(blk.backward(bc, grad, mode)),
            _ => panic!("layer/cache mismatch"),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Layer::Conv(c) => c.visit_params(prefix, f),
            Layer::BatchNorm(bn) => bn.visit_params(prefix, f),
            Layer::Linear(l) => l.visit_params(prefix, f),
            Layer::Block(b) => b.visit_params(prefix, f),
            Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, Vec<LayerCache<T>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&cur, train);
            caches.push(c);
            cur = y;
        }
        (cur, caches)
    }

    /// Backpropagates through all layers. Returns the input gradient when
    /// `input_grad` is set.
    pub fn backward(
        &mut self,
        caches: &[LayerCache<T>],
        grad: &Tensor<T>,
        mode: ParamGrads,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut g = grad.clone();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            let need = i > 0 || input_grad;
            g = layer.backward(cache, &g, mode, need)?;
        }
        Some(g)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.{i}"), f);
        }
    }
}

pub(crate) fn dims4<T: Scalar>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a [B, C, H, W] tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}
