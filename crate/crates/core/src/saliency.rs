//! Grad-CAM context extraction.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DualBranchModel, FeaturePass, Head};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Softmax with max subtraction.
pub fn fitting_probability<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    if logits.is_empty() {
        return Err(Error::invalid("empty logit vector"));
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exp.iter().copied().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// A class activation map at image resolution, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap<T> {
    pub values: Vec<T>,
    pub height: usize,
    pub width: usize,
    pub source_class: usize,
    pub source_image_id: usize,
}

/// Bilinear resize of a single-channel map (half-pixel centres, edges
/// clamped).
pub fn bilinear_resize<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, T::of(s - i0 as f64))
            })
            .collect()
    };
    let ys = axis(oh, h);
    let xs = axis(ow, w);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
            let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
            out.push(top * (T::one() - ly) + bot * ly);
        }
    }
    out
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize<T: Scalar>(values: &mut [T]) {
    let lo = values.iter().copied().fold(T::infinity(), T::min);
    let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
    if hi > lo {
        let span = hi - lo;
        values
            .iter_mut()
            .for_each(|v| *v = ((*v - lo) / span).min(T::one()).max(T::zero()));
    } else {
        values.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Grad-CAM for one sample given its `[C, h, w]` feature map and the
/// gradient of the class score with respect to it.
pub fn cam_from_gradients<T: Scalar>(
    fmap: &[T],
    grad: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    let mut cam = vec![T::zero(); hw];
    for c in 0..channels {
        let alpha = grad[c * hw..(c + 1) * hw].iter().copied().sum::<T>() * inv;
        for (m, &a) in cam.iter_mut().zip(&fmap[c * hw..(c + 1) * hw]) {
            *m += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(T::zero()));
    let mut up = bilinear_resize(&cam, h, w, out_h, out_w);
    min_max_normalize(&mut up);
    up
}

/// Grad-CAM maps for selected rows of a uniform-branch pass, targeting
/// `classes[i]` for row `rows[i]`. Parameter gradients are left untouched.
pub fn grad_cam_from_pass<T: Scalar>(
    model: &mut DualBranchModel<T>,
    pass: &FeaturePass<T>,
    rows: &[usize],
    classes: &[usize],
) -> Result<Vec<ActivationMap<T>>> {
    let fmap = &pass.trace.fmap;
    if fmap.shape().len() != 4 {
        return Err(Error::invalid("extractor has no convolutional feature map"));
    }
    let (b, c, h, w) = (fmap.dim(0), fmap.dim(1), fmap.dim(2), fmap.dim(3));
    let k = model.num_classes;
    let mut dlogits = Tensor::zeros(&[b, k]);
    for (&r, &cls) in rows.iter().zip(classes) {
        if cls >= k {
            return Err(Error::InvalidLabel { label: cls, classes: k });
        }
        dlogits.data_mut()[r * k + cls] = T::one();
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let grad = model.fmap_grad(Head::Uniform, pass, &dlogits);
    let spec = model.spec();
    Ok(rows
        .iter()
        .zip(classes)
        .map(|(&r, &cls)| ActivationMap {
            values: cam_from_gradients(fmap.outer(r), grad.outer(r), c, h, w, spec.height, spec.width),
            height: spec.height,
            width: spec.width,
            source_class: cls,
            source_image_id: r,
        })
        .collect())
}

/// Grad-CAM of one raw channel-last image for `target_class`.
pub fn grad_cam<T: Scalar>(
    model: &mut DualBranchModel<T>,
    image: &[f32],
    target_class: usize,
) -> Result<ActivationMap<T>> {
    let x = model.prepare(image, 1)?;
    let pass = model.features(&x, false);
    Ok(grad_cam_from_pass(model, &pass, &[0], &[target_class])?.remove(0))
}

pub fn background_mask<T: Scalar>(cam: &ActivationMap<T>) -> Vec<T> {
    cam.values.iter().map(|&v| T::one() - v).collect()
}

/// An image with its continuous background mask (`1 - cam`).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEntry {
    /// Channel-last `H x W x C`, raw `[0, 1]` values.
    pub image: Vec<f32>,
    /// `H x W`.
    pub mask: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ContextEntry {
    pub fn from_cam<T: Scalar>(image: Vec<f32>, channels: usize, cam: &ActivationMap<T>) -> Self {
        let cam32: Vec<f32> = cam.values.iter().map(|v| v.as_f64() as f32).collect();
        Self {
            image,
            mask: cam32.iter().map(|&v| 1.0 - v).collect(),
            height: cam.height,
            width: cam.width,
            channels,
        }
    }
}

/// Rows whose ground-truth probability is at least `delta`.
pub fn confident_rows<T: Scalar>(logits: &Tensor<T>, labels: &[usize], delta: f64) -> Result<Vec<usize>> {
    let k = logits.dim(1);
    let mut rows = Vec::new();
    for (r, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidLabel { label: y, classes: k });
        }
        let p = fitting_probability(logits.outer(r))?;
        if p[y].as_f64() >= delta {
            rows.push(r);
        }
    }
    Ok(rows)
}

/// Extraction reusing a uniform-branch pass: every row with
/// `p(y|x) >= delta` yields `(image, 1 - cam)` at its label.
pub fn extract_from_pass<T: Scalar>(
    model: &mut DualBranchModel<T>,
    pass: &FeaturePass<T>,
    logits: &Tensor<T>,
    images: &[f32],
    labels: &[usize],
    delta: f64,
) -> Result<Vec<ContextEntry>> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::invalid(format!("threshold delta={delta} outside [0, 1]")));
    }
    let rows = confident_rows(logits, labels, delta)?;
    let classes: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
    let cams = grad_cam_from_pass(model, pass, &rows, &classes)?;
    let spec = model.spec();
    let n = spec.height * spec.width * spec.in_channels;
    Ok(rows
        .iter()
        .zip(&cams)
        .map(|(&r, cam)| ContextEntry::from_cam(images[r * n..(r + 1) * n].to_vec(), spec.in_channels, cam))
        .collect())
}

/// Forward pass plus extraction for a batch of raw channel-last images.
pub fn select_and_extract<T: Scalar>(
    model: &mut DualBranchModel<T>,
    images: &[f32],
    labels: &[usize],
    delta: f64,
) -> Result<Vec<ContextEntry>> {
    let x = model.prepare(images, labels.len())?;
    let pass = model.features(&x, false);
    let logits = model.logits(Head::Uniform, &pass.features);
    extract_from_pass(model, &pass, &logits, images, labels, delta)
}

/// Writes `[0, 1]` values as an 8-bit grayscale PNG.
pub fn save_gray_png(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Shape(format!("{} values for a {height}x{width} image", values.len())))?;
    img.save(path)?;
    Ok(())
}

/// Writes a channel-last `[0, 1]` image with 1 or 3 channels as PNG.
pub fn save_image_png(image: &[f32], height: usize, width: usize, channels: usize, path: &Path) -> Result<()> {
    match channels {
        1 => save_gray_png(image, height, width, path),
        3 => {
            let bytes: Vec<u8> = image
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
                .ok_or_else(|| Error::Shape(format!("{} values for a {height}x{width}x3 image", image.len())))?;
            img.save(path)?;
            Ok(())
        }
        c => Err(Error::invalid(format!("cannot render {c}-channel images"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        let p = fitting_probability(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        let p = fitting_probability(&[1000.0f32, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1] >= 0.0);
        assert!(fitting_probability(&[f64::NAN, 0.0]).is_err());
        assert!(fitting_probability(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn single_channel_cam_follows_activation() {
        let fmap = [0.0, 1.0, 2.0, 4.0, 9.0, 9.0, 9.0, 9.0];
        let grad = [0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0];
        let cam = cam_from_gradients(&fmap, &grad, 2, 2, 2, 2, 2);
        assert_eq!(cam, vec![0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn negative_gradients_give_zero_map() {
        let fmap = [1.0, 2.0, 3.0, 4.0];
        let cam = cam_from_gradients(&fmap, &[-1.0; 4], 1, 2, 2, 4, 4);
        assert!(cam.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_resize(&src, 2, 2, 2, 2), src.to_vec());
        assert!(bilinear_resize(&[0.7; 4], 2, 2, 5, 3)
            .iter()
            .all(|&v| (v - 0.7f64).abs() < 1e-15));
        // 1x2 -> 1x4 with half-pixel centres
        assert_eq!(bilinear_resize(&[0.0, 1.0], 1, 2, 1, 4), vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn mask_is_complement() {
        let cam = ActivationMap {
            values: vec![0.0, 0.3, 1.0],
            height: 1,
            width: 3,
            source_class: 0,
            source_image_id: 0,
        };
        assert_eq!(background_mask(&cam), vec![1.0, 0.7, 0.0]);
    }
}
