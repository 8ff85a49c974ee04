//! Colour-injected MNIST-LT with label noise.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LongTailDataset;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};

/// Ten RGB colours with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPalette {
    pub colors: Vec<[f32; 3]>,
}

impl ColorPalette {
    /// The default seaborn categorical palette.
    pub fn seaborn() -> Self {
        const HEX: [u32; 10] = [
            0x1f77b4, 0xff7f0e, 0x2ca02c, 0xd62728, 0x9467bd, 0x8c564b, 0xe377c2, 0x7f7f7f, 0xbcbd22, 0x17becf,
        ];
        let colors = HEX
            .iter()
            .map(|&h| {
                let ch = |shift: u32| ((h >> shift) & 0xff) as f32 / 255.0;
                [ch(16), ch(8), ch(0)]
            })
            .collect();
        Self { colors }
    }

    pub fn new(colors: Vec<[f32; 3]>) -> Result<Self> {
        let palette = Self { colors };
        palette.validate()?;
        Ok(palette)
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != 10 {
            return Err(Error::invalid(format!(
                "palette needs 10 colours, got {}",
                self.colors.len()
            )));
        }
        if self.colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("palette channels must lie in [0, 1]"));
        }
        for (i, a) in self.colors.iter().enumerate() {
            if self.colors[..i].contains(a) {
                return Err(Error::invalid(format!("palette colour {i} is a duplicate")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

impl Default for ColorPalette {
    fn default() -> Self {
        Self::seaborn()
    }
}

/// Tints a grayscale image: `out[.., c] = image * color[c]`, channel-last.
pub fn colorize(image: &[f32], color: [f32; 3]) -> Vec<f32> {
    let mut out = Vec::with_capacity(image.len() * 3);
    for &v in image {
        out.extend(color.iter().map(|&c| v * c));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub index: usize,
    pub from: usize,
    pub to: usize,
}

/// How a CMNIST-LT training set was derived from its grayscale base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmnistRecord {
    pub flip_prob: f64,
    pub palette: ColorPalette,
    pub clean_labels: Vec<usize>,
    pub flips: Vec<FlipRecord>,
    /// Palette index used for every sample.
    pub color_index: Vec<usize>,
    pub head_classes: Vec<usize>,
    /// `(class, palette index)` for every tail class.
    pub tail_colors: Vec<(usize, usize)>,
}

/// Flips labels with probability `flip_prob` to a uniformly chosen other
/// class, then colours the (possibly flipped) classes: the five largest
/// classes get a random palette colour per sample, each remaining class one
/// fixed colour of its own.
pub fn build_cmnist_lt(
    base: &LongTailDataset,
    flip_prob: f64,
    palette: &ColorPalette,
    seed: u64,
) -> Result<LongTailDataset> {
    let k = base.num_classes();
    if k != 10 {
        return Err(Error::invalid(format!("CMNIST-LT needs 10 classes, base has {k}")));
    }
    if base.images.channels != 1 {
        return Err(Error::invalid(format!(
            "CMNIST-LT needs a grayscale base, got {} channels",
            base.images.channels
        )));
    }
    if !(0.0..1.0).contains(&flip_prob) {
        return Err(Error::invalid(format!("flip probability {flip_prob} outside [0, 1)")));
    }
    palette.validate()?;

    let clean = base.labels().to_vec();
    let mut labels = clean.clone();
    let mut flips = Vec::new();
    let mut rng = stream_rng(seed, streams::FLIP);
    for (index, label) in labels.iter_mut().enumerate() {
        if rng.random::<f64>() < flip_prob {
            let r = rng.random_range(0..k - 1);
            let to = if r >= *label { r + 1 } else { r };
            flips.push(FlipRecord {
                index,
                from: *label,
                to,
            });
            *label = to;
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| base.profile.counts[b].cmp(&base.profile.counts[a]).then(a.cmp(&b)));
    let mut head_classes = order[..5].to_vec();
    head_classes.sort_unstable();
    let mut tail: Vec<usize> = order[5..].to_vec();
    tail.sort_unstable();

    let mut rng = stream_rng(seed, streams::COLOR);
    let mut perm: Vec<usize> = (0..palette.len()).collect();
    perm.shuffle(&mut rng);
    let tail_colors: Vec<(usize, usize)> = tail.iter().copied().zip(perm).collect();
    let mut fixed = [None; 10];
    for &(class, color) in &tail_colors {
        fixed[class] = Some(color);
    }

    let hw = base.images.height * base.images.width;
    let mut images = Vec::with_capacity(labels.len() * hw * 3);
    let mut color_index = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let c = match fixed[label] {
            Some(c) => c,
            None => rng.random_range(0..palette.len()),
        };
        color_index.push(c);
        images.extend(colorize(base.images.image(i), palette.colors[c]));
    }

    let images = ImageSet::new(base.images.height, base.images.width, 3, k, images, labels)?;
    Ok(LongTailDataset {
        name: base.name.clone(),
        images,
        profile: base.profile.clone(),
        shot_groups: base.shot_groups.clone(),
        seed,
        source_indices: base.source_indices.clone(),
        cmnist: Some(CmnistRecord {
            flip_prob,
            palette: palette.clone(),
            clean_labels: clean,
            flips,
            color_index,
            head_classes,
            tail_colors,
        }),
    })
}

/// Colours every test image with an independent uniformly random palette
/// colour, leaving labels untouched. Returns the palette index per image.
pub fn colorize_test_set(test: &ImageSet, palette: &ColorPalette, seed: u64) -> Result<(ImageSet, Vec<usize>)> {
    if test.channels != 1 {
        return Err(Error::invalid("test colouring needs grayscale images"));
    }
    let mut rng = stream_rng(seed, streams::TEST_COLOR);
    let mut images = Vec::with_capacity(test.images.len() * 3);
    let mut colors = Vec::with_capacity(test.len());
    for i in 0..test.len() {
        let c = rng.random_range(0..palette.len());
        colors.push(c);
        images.extend(colorize(test.image(i), palette.colors[c]));
    }
    let set = ImageSet::new(
        test.height,
        test.width,
        3,
        test.num_classes,
        images,
        test.labels.clone(),
    )?;
    Ok((set, colors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seaborn_palette_is_valid() {
        let p = ColorPalette::seaborn();
        p.validate().unwrap();
        assert!((p.colors[0][0] - 0.121_568_63).abs() < 1e-7);
        assert!((p.colors[9][2] - 0.811_764_7).abs() < 1e-6);
    }

    #[test]
    fn colorize_is_linear_tint() {
        assert_eq!(colorize(&[0.5], [1.0, 0.0, 0.0]), vec![0.5, 0.0, 0.0]);
        assert_eq!(
            colorize(&[0.3, 0.0], [1.0, 1.0, 1.0]),
            vec![0.3, 0.3, 0.3, 0.0, 0.0, 0.0]
        );
        assert!(colorize(&[0.0; 4], [0.2, 0.9, 0.4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn palette_rejects_duplicates() {
        let mut colors = ColorPalette::seaborn().colors;
        colors[3] = colors[0];
        assert!(ColorPalette::new(colors).is_err());
    }
}
