//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes   "CTXSCKPT"
//! length   u32 LE    byte length of the JSON header
//! header   JSON      CheckpointHeader
//! payload            for every header.params entry, in order:
//!                    value then momentum, `len` little-endian scalars each
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualBranchModel, Normalizer};
use crate::nn::BackboneSpec;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CTXSCKPT";
const VERSION: u32 = 1;

/// Position of one named generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub name: String,
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// Word position (u128, decimal).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(name: &str, rng: &ChaCha8Rng) -> Self {
        Self {
            name: name.to_string(),
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Config(format!("malformed rng state {:?}", self.name));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, k) in key.iter_mut().enumerate() {
            *k = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub len: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub scalar: String,
    pub backbone: BackboneSpec,
    pub num_classes: usize,
    pub normalizer: Normalizer,
    pub epoch: usize,
    pub lr: f64,
    #[serde(default)]
    pub rng: Vec<RngState>,
    /// Free-form training configuration.
    #[serde(default)]
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub model: DualBranchModel<T>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &mut DualBranchModel<T>,
    epoch: usize,
    lr: f64,
    rng: Vec<RngState>,
    config: serde_json::Value,
) -> Result<()> {
    let mut params = Vec::new();
    let mut payload = Vec::new();
    model.visit_params(&mut |name, p| {
        params.push(ParamEntry {
            name: name.to_string(),
            len: p.len(),
            trainable: p.trainable,
        });
        payload.extend(T::to_le_bytes_vec(&p.value));
        payload.extend(T::to_le_bytes_vec(&p.velocity));
    });
    let header = CheckpointHeader {
        version: VERSION,
        scalar: T::NAME.to_string(),
        backbone: model.spec(),
        num_classes: model.num_classes,
        normalizer: model.normalizer.clone(),
        epoch,
        lr,
        rng,
        config,
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?)?;
    if header.version != VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    if header.scalar != T::NAME {
        return Err(bad(format!("stored as {}, requested {}", header.scalar, T::NAME)));
    }
    let width = std::mem::size_of::<T>();
    let expected: usize = header.params.iter().map(|p| 2 * p.len * width).sum();
    let payload = &bytes[12 + hlen..];
    if payload.len() != expected {
        return Err(bad(format!("payload is {} bytes, expected {expected}", payload.len())));
    }
    let mut rng = crate::rng::stream_rng(0, 0);
    let mut model = DualBranchModel::new(header.backbone, header.num_classes, header.normalizer.clone(), &mut rng);
    let mut offset = 0;
    let mut idx = 0;
    let mut mismatch = None;
    model.visit_params(&mut |name, p| {
        let Some(entry) = header.params.get(idx) else {
            mismatch.get_or_insert(format!("extra parameter {name}"));
            return;
        };
        idx += 1;
        if entry.name != name || entry.len != p.len() {
            mismatch.get_or_insert(format!("parameter {name} does not match stored {}", entry.name));
            return;
        }
        let n = entry.len * width;
        p.value = T::from_le_bytes_vec(&payload[offset..offset + n]);
        p.velocity = T::from_le_bytes_vec(&payload[offset + n..offset + 2 * n]);
        offset += 2 * n;
    });
    if let Some(m) = mismatch {
        return Err(bad(m));
    }
    if idx != header.params.len() {
        return Err(bad("checkpoint holds parameters the model lacks".into()));
    }
    Ok(Checkpoint { header, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BackboneKind;
    use rand::{Rng, SeedableRng};

    #[test]
    fn roundtrip_preserves_parameters_and_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = BackboneSpec {
            kind: BackboneKind::LeNet,
            in_channels: 1,
            height: 28,
            width: 28,
            embed_dim: 2,
        };
        let mut model = DualBranchModel::<f32>::new(spec, 10, Normalizer::identity(1), &mut rng);
        model.head_uniform.weight.velocity[3] = 0.25;
        let _ = rng.random::<u64>();
        let state = RngState::capture("order", &rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(
            &path,
            &mut model,
            7,
            0.01,
            vec![state.clone()],
            serde_json::json!({"seed": 4}),
        )
        .unwrap();
        let mut loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.header.epoch, 7);
        assert_eq!(loaded.model.named_values(), model.named_values());
        assert_eq!(loaded.model.head_uniform.weight.velocity[3], 0.25);
        let mut restored = loaded.header.rng[0].restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
