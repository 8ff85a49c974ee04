//! Labelled image sets and loaders for the balanced source datasets.

use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Images stored channel-last (`N x H x W x C`) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        num_classes: usize,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let set = Self {
            height,
            width,
            channels,
            num_classes,
            images,
            labels,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(Error::Shape(format!(
                "{} pixels for {} images of {}x{}x{}",
                self.images.len(),
                self.labels.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }

    /// Indices of every sample, grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    /// New set holding the given samples in the given order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let n = self.image_len();
        let mut images = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        ImageSet {
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-channel mean and standard deviation over all pixels.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, &v) in self.images.iter().enumerate() {
            sum[i % c] += v as f64;
            sq[i % c] += (v as f64) * (v as f64);
        }
        let count = (self.images.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        (mean, std)
    }
}

pub fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Balanced datasets the long-tail benchmarks are carved from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl SourceKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            SourceKind::Mnist => "mnist",
            SourceKind::FashionMnist => "fashion-mnist",
            SourceKind::Cifar10 => "cifar-10-batches-bin",
            SourceKind::Cifar100 => "cifar-100-binary",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            SourceKind::Cifar100 => 100,
            _ => 10,
        }
    }

    fn fetch_hint(self) -> &'static str {
        match self {
            SourceKind::Mnist | SourceKind::FashionMnist => {
                "run scripts/fetch-data.sh <data dir> (pulls MNIST and Fashion-MNIST from the npm registry)"
            }
            SourceKind::Cifar10 => {
                "download cifar-10-binary.tar.gz from https://www.cs.toronto.edu/~kriz/cifar.html and extract it into the data dir"
            }
            SourceKind::Cifar100 => {
                "download cifar-100-binary.tar.gz from https://www.cs.toronto.edu/~kriz/cifar.html and extract it into the data dir"
            }
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(SourceKind::Mnist),
            "fashion-mnist" | "fashion" => Ok(SourceKind::FashionMnist),
            "cifar10" | "cifar-10" => Ok(SourceKind::Cifar10),
            "cifar100" | "cifar-100" => Ok(SourceKind::Cifar100),
            other => Err(Error::invalid(format!("unknown source dataset {other:?}"))),
        }
    }
}

/// Standard train/test split of a source dataset.
#[derive(Debug, Clone)]
pub struct SourceSplits {
    pub kind: SourceKind,
    pub train: ImageSet,
    pub test: ImageSet,
}

pub fn load_source(kind: SourceKind, data_root: &Path) -> Result<SourceSplits> {
    let dir = data_root.join(kind.dir_name());
    let missing = |path: PathBuf| Error::MissingSource {
        path,
        hint: kind.fetch_hint().to_string(),
    };
    if !dir.is_dir() {
        return Err(missing(dir));
    }
    let (train, test) = match kind {
        SourceKind::Mnist | SourceKind::FashionMnist => {
            let load = |prefix: &str| -> Result<ImageSet> {
                let images =
                    find_idx(&dir, &format!("{prefix}-images-idx3-ubyte")).ok_or_else(|| missing(dir.clone()))?;
                let labels =
                    find_idx(&dir, &format!("{prefix}-labels-idx1-ubyte")).ok_or_else(|| missing(dir.clone()))?;
                read_idx_pair(&images, &labels, 10)
            };
            (load("train")?, load("t10k")?)
        }
        SourceKind::Cifar10 => {
            let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            if let Some(p) = train.iter().find(|p| !p.is_file()) {
                return Err(missing(p.clone()));
            }
            let test = dir.join("test_batch.bin");
            if !test.is_file() {
                return Err(missing(test));
            }
            (read_cifar(&train, 10, 0)?, read_cifar(&[test], 10, 0)?)
        }
        SourceKind::Cifar100 => {
            let train = dir.join("train.bin");
            let test = dir.join("test.bin");
            for p in [&train, &test] {
                if !p.is_file() {
                    return Err(missing(p.clone()));
                }
            }
            // records carry a coarse label byte before the fine label
            (read_cifar(&[train], 100, 1)?, read_cifar(&[test], 100, 1)?)
        }
    };
    Ok(SourceSplits { kind, train, test })
}

fn find_idx(dir: &Path, stem: &str) -> Option<PathBuf> {
    [dir.join(format!("{stem}.gz")), dir.join(stem)]
        .into_iter()
        .find(|p| p.is_file())
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn read_idx_pair(images: &Path, labels: &Path, num_classes: usize) -> Result<ImageSet> {
    let img = read_maybe_gz(images)?;
    let lab = read_maybe_gz(labels)?;
    let bad = |path: &Path, reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if img.len() < 16 || be_u32(&img, 0) != 0x803 {
        return Err(bad(images, "not an IDX3 ubyte image file"));
    }
    if lab.len() < 8 || be_u32(&lab, 0) != 0x801 {
        return Err(bad(labels, "not an IDX1 ubyte label file"));
    }
    let (n, h, w) = (be_u32(&img, 4), be_u32(&img, 8), be_u32(&img, 12));
    if img.len() != 16 + n * h * w {
        return Err(bad(images, "truncated image payload"));
    }
    if be_u32(&lab, 4) != n || lab.len() != 8 + n {
        return Err(bad(labels, "label count does not match image count"));
    }
    let pixels = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lab[8..].iter().map(|&b| b as usize).collect();
    ImageSet::new(h, w, 1, num_classes, pixels, labels)
}

/// Reads CIFAR binary batches (`[label bytes..., 3072 CHW pixels]` records),
/// converting to channel-last.
fn read_cifar(paths: &[PathBuf], num_classes: usize, label_offset: usize) -> Result<ImageSet> {
    let record = label_offset + 1 + 3072;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.len() % record != 0 {
            return Err(Error::Format {
                path: path.clone(),
                reason: format!("size {} is not a multiple of the {record}-byte record", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(rec[label_offset] as usize);
            let px = &rec[label_offset + 1..];
            for p in 0..1024 {
                for c in 0..3 {
                    images.push(px[c * 1024 + p] as f32 / 255.0);
                }
            }
        }
    }
    ImageSet::new(32, 32, 3, num_classes, images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx(dir: &Path) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 51, 102, 255, 255, 0, 0]);
        let mut lab = vec![0, 0, 8, 1, 0, 0, 0, 2];
        lab.extend_from_slice(&[3, 7]);
        File::create(dir.join("train-images-idx3-ubyte"))
            .unwrap()
            .write_all(&img)
            .unwrap();
        let mut gz = flate2::write::GzEncoder::new(
            File::create(dir.join("train-labels-idx1-ubyte.gz")).unwrap(),
            flate2::Compression::default(),
        );
        gz.write_all(&lab).unwrap();
        gz.finish().unwrap();
    }

    #[test]
    fn reads_plain_and_gzipped_idx() {
        let dir = tempfile::tempdir().unwrap();
        write_idx(dir.path());
        let set = read_idx_pair(
            &find_idx(dir.path(), "train-images-idx3-ubyte").unwrap(),
            &find_idx(dir.path(), "train-labels-idx1-ubyte").unwrap(),
            10,
        )
        .unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels, vec![3, 7]);
        assert_eq!(set.image(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(set.class_histogram()[3], 1);
    }

    #[test]
    fn missing_source_names_the_fetch_script() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_source(SourceKind::Mnist, dir.path()).unwrap_err();
        assert!(err.to_string().contains("fetch-data.sh"), "{err}");
    }

    #[test]
    fn select_preserves_order_and_labels() {
        let set = ImageSet::new(1, 1, 1, 3, vec![0.1, 0.2, 0.3], vec![0, 1, 2]).unwrap();
        let sub = set.select(&[2, 0, 2]);
        assert_eq!(sub.images, vec![0.3, 0.1, 0.3]);
        assert_eq!(sub.labels, vec![2, 0, 2]);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(ImageSet::new(1, 1, 1, 2, vec![0.0], vec![2]).is_err());
    }
}
