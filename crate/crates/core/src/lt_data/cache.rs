//! Named benchmarks and their on-disk cache.
//!
//! Layout: `<root>/<name>/<rho>/<seed>/` holding
//! `train_images.f32` / `test_images.f32` (little-endian `f32`, `N x H x W x C`),
//! `train_labels.u8` / `test_labels.u8` (one byte per label) and
//! `manifest.json` (profile, shot groups, palette, flips, file digests).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    build_cmnist_lt, build_longtail_profile, colorize_test_set, subsample_dataset, ClassProfile, CmnistRecord,
    ColorPalette, FlipRecord, LongTailDataset, ShotGroups,
};
use crate::data::{histogram, load_source, ImageSet, SourceKind};
use crate::error::{Error, Result};

/// Overrides the benchmark cache root (default `./cache`).
pub const CACHE_ENV: &str = "CTXSHIFT_CACHE";
/// Overrides the source dataset root (default `./data`).
pub const DATA_ENV: &str = "CTXSHIFT_DATA";

const FORMAT_VERSION: u32 = 1;

pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_ENV).map_or_else(|| PathBuf::from("cache"), PathBuf::from)
}

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BenchmarkName {
    #[serde(rename = "mnist-lt")]
    MnistLt,
    #[serde(rename = "fashion-lt")]
    FashionLt,
    #[serde(rename = "cmnist-lt")]
    CmnistLt,
    #[serde(rename = "cifar10-lt")]
    Cifar10Lt,
    #[serde(rename = "cifar100-lt")]
    Cifar100Lt,
}

impl BenchmarkName {
    pub const ALL: [BenchmarkName; 5] = [
        BenchmarkName::MnistLt,
        BenchmarkName::FashionLt,
        BenchmarkName::CmnistLt,
        BenchmarkName::Cifar10Lt,
        BenchmarkName::Cifar100Lt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkName::MnistLt => "mnist-lt",
            BenchmarkName::FashionLt => "fashion-lt",
            BenchmarkName::CmnistLt => "cmnist-lt",
            BenchmarkName::Cifar10Lt => "cifar10-lt",
            BenchmarkName::Cifar100Lt => "cifar100-lt",
        }
    }

    pub fn source(self) -> SourceKind {
        match self {
            BenchmarkName::MnistLt | BenchmarkName::CmnistLt => SourceKind::Mnist,
            BenchmarkName::FashionLt => SourceKind::FashionMnist,
            BenchmarkName::Cifar10Lt => SourceKind::Cifar10,
            BenchmarkName::Cifar100Lt => SourceKind::Cifar100,
        }
    }

    /// Largest class size.
    pub fn default_n_max(self) -> usize {
        match self {
            BenchmarkName::Cifar100Lt => 500,
            _ => 5000,
        }
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|n| n.as_str()).collect();
            Error::invalid(format!("unknown dataset {s:?} (valid: {})", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub name: BenchmarkName,
    pub rho: f64,
    pub seed: u64,
    pub n_max: usize,
    /// Label noise for CMNIST-LT; ignored elsewhere.
    pub flip_prob: f64,
}

impl BenchmarkSpec {
    pub fn new(name: BenchmarkName, rho: f64, seed: u64) -> Self {
        Self {
            name,
            rho,
            seed,
            n_max: name.default_n_max(),
            flip_prob: 0.25,
        }
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(self.name.as_str())
            .join(format!("{}", self.rho))
            .join(self.seed.to_string())
    }
}

/// A long-tail training set with the matching balanced test split.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub spec: BenchmarkSpec,
    pub train: LongTailDataset,
    pub test: ImageSet,
    /// Palette index per test image (CMNIST-LT only).
    pub test_color_index: Option<Vec<usize>>,
}

pub fn build_benchmark(spec: &BenchmarkSpec, data_root: &Path) -> Result<Benchmark> {
    let source = load_source(spec.name.source(), data_root)?;
    let profile = build_longtail_profile(source.train.num_classes, spec.n_max, spec.rho)?;
    let mut train = subsample_dataset(&source.train, &profile, spec.seed)?;
    train.name = spec.name.to_string();
    let mut test = source.test;
    let mut test_color_index = None;
    if spec.name == BenchmarkName::CmnistLt {
        let palette = ColorPalette::seaborn();
        train = build_cmnist_lt(&train, spec.flip_prob, &palette, spec.seed)?;
        let (colored, colors) = colorize_test_set(&test, &palette, spec.seed)?;
        test = colored;
        test_color_index = Some(colors);
    }
    Ok(Benchmark {
        spec: *spec,
        train,
        test,
        test_color_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Built,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: BenchmarkSpec,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub train_len: usize,
    pub test_len: usize,
    pub profile: ClassProfile,
    pub observed_counts: Vec<usize>,
    pub shot_groups: ShotGroups,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<ColorPalette>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flips: Vec<FlipRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tail_colors: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_color_index: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_color_index: Option<Vec<usize>>,
    pub source_indices: Vec<usize>,
    /// SHA-256 of every payload file, keyed by file name.
    pub files: BTreeMap<String, String>,
}

const TRAIN_IMAGES: &str = "train_images.f32";
const TRAIN_LABELS: &str = "train_labels.u8";
const TEST_IMAGES: &str = "test_images.f32";
const TEST_LABELS: &str = "test_labels.u8";
const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn label_bytes(labels: &[usize]) -> Vec<u8> {
    labels.iter().map(|&l| l as u8).collect()
}

impl Benchmark {
    pub fn manifest(&self) -> Manifest {
        let rec = self.train.cmnist.as_ref();
        let files = [
            (TRAIN_IMAGES, f32_bytes(&self.train.images.images)),
            (TRAIN_LABELS, label_bytes(self.train.labels())),
            (TEST_IMAGES, f32_bytes(&self.test.images)),
            (TEST_LABELS, label_bytes(&self.test.labels)),
        ]
        .into_iter()
        .map(|(name, bytes)| (name.to_string(), sha256_hex(&bytes)))
        .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            spec: self.spec,
            height: self.train.images.height,
            width: self.train.images.width,
            channels: self.train.images.channels,
            num_classes: self.train.num_classes(),
            train_len: self.train.len(),
            test_len: self.test.len(),
            profile: self.train.profile.clone(),
            observed_counts: self.train.class_counts(),
            shot_groups: self.train.shot_groups.clone(),
            palette: rec.map(|r| r.palette.clone()),
            flips: rec.map(|r| r.flips.clone()).unwrap_or_default(),
            head_classes: rec.map(|r| r.head_classes.clone()).unwrap_or_default(),
            tail_colors: rec.map(|r| r.tail_colors.clone()).unwrap_or_default(),
            train_color_index: rec.map(|r| r.color_index.clone()).unwrap_or_default(),
            test_color_index: self.test_color_index.clone(),
            source_indices: self.train.source_indices.clone(),
            files,
        }
    }

    /// Writes the cache directory; returns the manifest digest.
    pub fn save(&self, cache_root: &Path) -> Result<String> {
        let dir = self.spec.dir(cache_root);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        write(TRAIN_IMAGES, &f32_bytes(&self.train.images.images))?;
        write(TRAIN_LABELS, &label_bytes(self.train.labels()))?;
        write(TEST_IMAGES, &f32_bytes(&self.test.images))?;
        write(TEST_LABELS, &label_bytes(&self.test.labels))?;
        let text = serde_json::to_string_pretty(&self.manifest())?;
        write(MANIFEST, text.as_bytes())?;
        Ok(sha256_hex(text.as_bytes()))
    }

    /// Reads a cache directory, verifying every payload digest.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let read = |name: &str| -> Result<Vec<u8>> {
            let path = dir.join(name);
            fs::read(&path).map_err(|e| Error::io(path, e))
        };
        let text = read(MANIFEST)?;
        let m: Manifest = serde_json::from_slice(&text)?;
        let bad = |reason: String| Error::Format {
            path: dir.to_path_buf(),
            reason,
        };
        if m.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "cache format {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        let mut payload = BTreeMap::new();
        for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
            let bytes = read(name)?;
            if m.files.get(name) != Some(&sha256_hex(&bytes)) {
                return Err(bad(format!("{name} does not match its recorded digest")));
            }
            payload.insert(name, bytes);
        }
        let floats = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let labels = |b: &[u8]| -> Vec<usize> { b.iter().map(|&l| l as usize).collect() };
        let train = ImageSet::new(
            m.height,
            m.width,
            m.channels,
            m.num_classes,
            floats(&payload[TRAIN_IMAGES]),
            labels(&payload[TRAIN_LABELS]),
        )?;
        let test = ImageSet::new(
            m.height,
            m.width,
            m.channels,
            m.num_classes,
            floats(&payload[TEST_IMAGES]),
            labels(&payload[TEST_LABELS]),
        )?;
        let cmnist = m.palette.clone().map(|palette| {
            let mut clean_labels = train.labels.clone();
            for f in &m.flips {
                clean_labels[f.index] = f.from;
            }
            CmnistRecord {
                flip_prob: m.spec.flip_prob,
                palette,
                clean_labels,
                flips: m.flips.clone(),
                color_index: m.train_color_index.clone(),
                head_classes: m.head_classes.clone(),
                tail_colors: m.tail_colors.clone(),
            }
        });
        let bench = Benchmark {
            spec: m.spec,
            train: LongTailDataset {
                name: m.spec.name.to_string(),
                images: train,
                profile: m.profile,
                shot_groups: m.shot_groups,
                seed: m.spec.seed,
                source_indices: m.source_indices,
                cmnist,
            },
            test,
            test_color_index: m.test_color_index,
        };
        if histogram(bench.train.clean_labels(), m.num_classes) != bench.train.profile.counts {
            return Err(bad("label histogram disagrees with the recorded profile".into()));
        }
        Ok((bench, sha256_hex(&text)))
    }
}

/// Loads the benchmark from the cache, building and saving it on a miss or
/// when the cached copy is stale or corrupt. Returns the manifest digest.
pub fn load_or_build(
    spec: &BenchmarkSpec,
    data_root: &Path,
    cache_root: &Path,
) -> Result<(Benchmark, CacheStatus, String)> {
    let dir = spec.dir(cache_root);
    if dir.join(MANIFEST).is_file() {
        if let Ok((bench, digest)) = Benchmark::load(&dir) {
            if bench.spec == *spec {
                return Ok((bench, CacheStatus::Hit, digest));
            }
        }
    }
    let bench = build_benchmark(spec, data_root)?;
    let digest = bench.save(cache_root)?;
    Ok((bench, CacheStatus::Built, digest))
}
