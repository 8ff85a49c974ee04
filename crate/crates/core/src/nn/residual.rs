use rand::Rng;

use super::{conv::ConvCache, norm::BatchNormCache};
use super::{dims4, BatchNorm2d, Conv2d, ParamGrads, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// CIFAR-style residual block: two 3x3 conv + BN pairs with a
/// parameter-free shortcut (strided subsampling plus zero channel padding
/// when the shape changes).
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub stride: usize,
    pub in_planes: usize,
    pub planes: usize,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    c1: ConvCache<T>,
    b1: BatchNormCache<T>,
    r1: Tensor<T>,
    c2: ConvCache<T>,
    b2: BatchNormCache<T>,
    out: Tensor<T>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> BasicBlock<T> {
    pub fn new<R: Rng + ?Sized>(in_planes: usize, planes: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new_he(in_planes, planes, 3, stride, 1, rng),
            bn1: BatchNorm2d::new(planes),
            conv2: Conv2d::new_he(planes, planes, 3, 1, 1, rng),
            bn2: BatchNorm2d::new(planes),
            stride,
            in_planes,
            planes,
        }
    }

    fn projects(&self) -> bool {
        self.stride != 1 || self.in_planes != self.planes
    }

    fn shortcut(&self, x: &Tensor<T>) -> Tensor<T> {
        if !self.projects() {
            return x.clone();
        }
        let (b, c, h, w) = dims4(x);
        let s = self.stride;
        let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
        let pad = (self.planes - c) / 2;
        let mut out = Tensor::zeros(&[b, self.planes, oh, ow]);
        for bi in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out.data_mut()[((bi * self.planes + ch + pad) * oh + oy) * ow + ox] =
                            x.data()[((bi * c + ch) * h + oy * s) * w + ox * s];
                    }
                }
            }
        }
        out
    }

    fn shortcut_backward(&self, grad: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
        if !self.projects() {
            return grad.clone();
        }
        let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (_, _, oh, ow) = dims4(grad);
        let s = self.stride;
        let pad = (self.planes - c) / 2;
        let mut dx = Tensor::zeros(input_shape);
        for bi in 0..b {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx.data_mut()[((bi * c + ch) * h + oy * s) * w + ox * s] +=
                            grad.data()[((bi * self.planes + ch + pad) * oh + oy) * ow + ox];
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, BlockCache<T>) {
        let (h1, c1) = self.conv1.forward(x);
        let (h1, b1) = self.bn1.forward(&h1, train);
        let r1 = h1.map(|v| v.max(T::zero()));
        let (h2, c2) = self.conv2.forward(&r1);
        let (mut h2, b2) = self.bn2.forward(&h2, train);
        h2.add_assign(&self.shortcut(x));
        let out = h2.map(|v| v.max(T::zero()));
        (
            out.clone(),
            BlockCache {
                c1,
                b1,
                r1,
                c2,
                b2,
                out,
                input_shape: x.shape().to_vec(),
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, grad: &Tensor<T>, mode: ParamGrads) -> Tensor<T> {
        let mut g = grad.clone();
        for (gv, &o) in g.data_mut().iter_mut().zip(cache.out.data()) {
            if o <= T::zero() {
                *gv = T::zero();
            }
        }
        let mut dx = self.shortcut_backward(&g, &cache.input_shape);
        let g2 = self.bn2.backward(&cache.b2, &g, mode);
        let mut g1 = self.conv2.backward(&cache.c2, &g2, mode, true).expect("input grad");
        for (gv, &r) in g1.data_mut().iter_mut().zip(cache.r1.data()) {
            if r <= T::zero() {
                *gv = T::zero();
            }
        }
        let g1 = self.bn1.backward(&cache.b1, &g1, mode);
        let g0 = self.conv1.backward(&cache.c1, &g1, mode, true).expect("input grad");
        dx.add_assign(&g0);
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
    }
}
