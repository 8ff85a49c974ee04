use super::dims4;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Non-overlapping max pooling (`kernel == stride`).
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl MaxPool2d {
    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, MaxPoolCache) {
        let (b, c, h, w) = dims4(x);
        let s = self.size;
        let (oh, ow) = (h / s, w / s);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0u32; out.len()];
        let xd = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * s * w + ox * s;
                    for dy in 0..s {
                        for dx in 0..s {
                            let i = base + (oy * s + dy) * w + ox * s + dx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    out.data_mut()[o] = xd[best];
                    argmax[o] = best as u32;
                }
            }
        }
        (
            out,
            MaxPoolCache {
                input_shape: x.shape().to_vec(),
                argmax,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, cache: &MaxPoolCache, grad: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(&cache.input_shape);
        for (&src, &g) in cache.argmax.iter().zip(grad.data()) {
            dx.data_mut()[src as usize] += g;
        }
        dx
    }
}
