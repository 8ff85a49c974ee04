use rand::Rng;

use super::{dims4, init, Param, ParamGrads, ParamVisitor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D convolution over `[B, C, H, W]` inputs, lowered to GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in * k * k]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

/// The forward input; im2col columns are rebuilt during backward to keep
/// memory proportional to the activations.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    input: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Conv layer with the fan-in uniform initializer and a bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(init::uniform_fan_in(out_channels * fan_in, fan_in, rng));
        let bias = Param::new(init::uniform_fan_in(out_channels, fan_in, rng));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: Some(bias),
        }
    }

    /// Bias-free conv with He-normal weights (followed by batch norm).
    pub fn new_he<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(init::kaiming_normal(out_channels * fan_in, fan_out, rng)),
            bias: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let k = self.kernel;
        let hw = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
        let k = self.kernel;
        let hw = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let (b, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let ckk = c * self.kernel * self.kernel;
        let hw = oh * ow;
        let mut cols = vec![T::zero(); ckk * hw];
        let mut out = Tensor::zeros(&[b, self.out_channels, oh, ow]);
        for bi in 0..b {
            self.im2col(x.outer(bi), h, w, oh, ow, &mut cols);
            let dst = out.outer_mut(bi);
            T::gemm(
                self.out_channels,
                ckk,
                hw,
                T::one(),
                &self.weight.value,
                (ckk as isize, 1),
                &cols,
                (hw as isize, 1),
                T::zero(),
                dst,
                (hw as isize, 1),
            );
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.value.iter().enumerate() {
                    dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        (out, ConvCache { input: x.clone() })
    }

    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        grad: &Tensor<T>,
        mode: ParamGrads,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let x = &cache.input;
        let (b, c, h, w) = dims4(x);
        let (oh, ow) = self.output_hw(h, w);
        let ckk = c * self.kernel * self.kernel;
        let hw = oh * ow;
        let mut cols = vec![T::zero(); ckk * hw];
        let mut dcols = vec![T::zero(); ckk * hw];
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        for bi in 0..b {
            let dy = grad.outer(bi);
            if mode == ParamGrads::Accumulate {
                self.im2col(x.outer(bi), h, w, oh, ow, &mut cols);
                T::gemm(
                    self.out_channels,
                    hw,
                    ckk,
                    T::one(),
                    dy,
                    (hw as isize, 1),
                    &cols,
                    (1, hw as isize),
                    T::one(),
                    &mut self.weight.grad,
                    (ckk as isize, 1),
                );
                if let Some(bias) = &mut self.bias {
                    for (o, g) in bias.grad.iter_mut().enumerate() {
                        *g += dy[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    ckk,
                    self.out_channels,
                    hw,
                    T::one(),
                    &self.weight.value,
                    (1, ckk as isize),
                    dy,
                    (hw as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (hw as isize, 1),
                );
                self.col2im(&dcols, h, w, oh, ow, dx.outer_mut(bi));
            }
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }
}
