//! Flat `section.key = value` experiment configuration.
//!
//! A config file is TOML restricted to dotted keys. Resolution starts from
//! the defaults of the chosen dataset and method, then applies file values,
//! then command-line overrides. The resolved form lists every key and is
//! itself a valid config file.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{Error, Result};
use crate::evaluation::HeadChoice;
use crate::lt_data::{BenchmarkName, BenchmarkSpec};
use crate::nn::{BackboneKind, LrSchedule};
use crate::training::{Augment, LambdaDist, ReplicaRefresh, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "CB_RS")]
    CbRs,
    #[serde(rename = "CRT")]
    Crt,
    #[serde(rename = "MIXUP")]
    Mixup,
    #[serde(rename = "CSA")]
    Csa,
    #[serde(rename = "CSA_MIXUP")]
    CsaMixup,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ce,
        Method::CbRs,
        Method::Crt,
        Method::Mixup,
        Method::Csa,
        Method::CsaMixup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ce => "CE",
            Method::CbRs => "CB_RS",
            Method::Crt => "CRT",
            Method::Mixup => "MIXUP",
            Method::Csa => "CSA",
            Method::CsaMixup => "CSA_MIXUP",
        }
    }

    /// Head used for reported accuracy.
    pub fn default_head(self) -> HeadChoice {
        match self {
            Method::Ce | Method::Mixup => HeadChoice::Uniform,
            Method::CbRs | Method::Crt | Method::Csa | Method::CsaMixup => HeadChoice::Balanced,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::ALL.into_iter().find(|m| m.as_str() == norm).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown method {s:?} (valid: {})", valid.join(", ")))
        })
    }
}

/// Everything needed to reproduce one run. `dataset.seed` and `train.seed`
/// are the same value, exposed as the single key `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: BenchmarkSpec,
    pub method: Method,
    pub head: HeadChoice,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn defaults(name: BenchmarkName, method: Method) -> Self {
        let mut train = TrainConfig::for_benchmark(name);
        train.mixup_uniform = method == Method::CsaMixup;
        Self {
            dataset: BenchmarkSpec::new(name, 100.0, 0),
            method,
            head: method.default_head(),
            train,
            output_dir: PathBuf::from("runs"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.dataset.seed
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
    }

    /// Defaults for the last `dataset.name` / `method` in `pairs`, overridden
    /// by every pair in order. All unknown keys are reported at once.
    pub fn resolve(pairs: &[(String, Value)]) -> Result<Self> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v);
        let name = match last("dataset.name") {
            Some(v) => str_value("dataset.name", v)?.parse()?,
            None => BenchmarkName::MnistLt,
        };
        let method = match last("method") {
            Some(v) => str_value("method", v)?.parse()?,
            None => Method::Ce,
        };
        let mut flat = Self::defaults(name, method).to_flat();
        let unknown: Vec<&str> = pairs
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !flat.contains_key(*k))
            .collect();
        if !unknown.is_empty() {
            let valid: Vec<&str> = flat.keys().map(String::as_str).collect();
            return Err(Error::Config(format!(
                "unknown keys: {} (valid keys: {})",
                unknown.join(", "),
                valid.join(", ")
            )));
        }
        for (k, v) in pairs {
            flat.insert(k.clone(), v.clone());
        }
        if !pairs.iter().any(|(k, _)| k == "train.bank_capacity") {
            flat.remove("train.bank_capacity");
        }
        let config = Self::from_flat(&flat)?;
        match config.method {
            Method::Csa | Method::CsaMixup => config.train.validate_csa()?,
            _ => config.train.validate()?,
        }
        Ok(config)
    }

    /// Parses and resolves config text.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::resolve(&parse_pairs(text)?)
    }

    /// Every key with its value; the inverse of [`ExperimentConfig::from_flat`].
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let t = &self.train;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        let int = |v: usize| Value::Integer(v as i64);
        let s = |v: &str| Value::String(v.to_string());

        put("dataset.name", s(self.dataset.name.as_str()));
        put("dataset.rho", Value::Float(self.dataset.rho));
        put("dataset.n_max", int(self.dataset.n_max));
        put("dataset.flip_prob", Value::Float(self.dataset.flip_prob));
        put("seed", Value::Integer(self.dataset.seed as i64));
        put("method", s(self.method.as_str()));
        put("eval.head", s(head_str(self.head)));
        put("output_dir", s(&self.output_dir.to_string_lossy()));

        put("train.epochs", int(t.epochs));
        put("train.warmup_epochs", int(t.warmup_epochs));
        put("train.freeze_aug_last_epochs", int(t.freeze_aug_last_epochs));
        put("train.batch_size", int(t.batch_size));
        put("train.delta", Value::Float(t.delta));
        put("train.bank_capacity", int(t.bank_capacity()));
        let (dist, a, b) = match t.lambda {
            LambdaDist::Uniform { a, b } => ("uniform", a, b),
            LambdaDist::Beta { a, b } => ("beta", a, b),
        };
        put("train.lambda.dist", s(dist));
        put("train.lambda.a", Value::Float(a));
        put("train.lambda.b", Value::Float(b));
        put("train.lambda_per_sample", Value::Boolean(t.lambda_per_sample));
        put("train.optimizer.lr", Value::Float(t.optimizer.lr));
        put("train.optimizer.momentum", Value::Float(t.optimizer.momentum));
        put("train.optimizer.weight_decay", Value::Float(t.optimizer.weight_decay));
        let (kind, milestones, gamma) = match &t.optimizer.schedule {
            LrSchedule::Constant => ("constant", Vec::new(), 0.1),
            LrSchedule::Cosine => ("cosine", Vec::new(), 0.1),
            LrSchedule::MultiStep { milestones, gamma } => ("multistep", milestones.clone(), *gamma),
        };
        put("train.optimizer.schedule", s(kind));
        put(
            "train.optimizer.milestones",
            Value::Array(milestones.into_iter().map(int).collect()),
        );
        put("train.optimizer.gamma", Value::Float(gamma));
        put("train.loss_uniform", s("cross_entropy"));
        put("train.loss_balanced", s("cross_entropy"));
        put(
            "train.replica_refresh",
            s(match t.replica_refresh {
                ReplicaRefresh::Once => "once",
                ReplicaRefresh::PerEpoch => "per_epoch",
            }),
        );
        let (aug, pad) = match t.augment {
            Augment::None => ("none", 4),
            Augment::CropFlip { pad } => ("crop_flip", pad),
        };
        put("train.augment", s(aug));
        put("train.augment_pad", int(pad));
        put("train.normalize", Value::Boolean(t.normalize));
        put("train.backbone", s(&t.backbone.to_string()));
        put("train.embed_dim", int(t.embed_dim));
        put("train.mixup_alpha", Value::Float(t.mixup_alpha));
        put("train.crt_epochs", int(t.crt_epochs));
        put("train.eval_each_epoch", Value::Boolean(t.eval_each_epoch));
        m
    }

    /// Builds a config from a complete key map.
    pub fn from_flat(m: &BTreeMap<String, Value>) -> Result<Self> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Config(format!("missing key {k}")));
        let f = |k: &str| get(k).and_then(|v| float_value(k, v));
        let u = |k: &str| get(k).and_then(|v| usize_value(k, v));
        let b = |k: &str| get(k).and_then(|v| bool_value(k, v));
        let st = |k: &str| get(k).and_then(|v| str_value(k, v).map(str::to_string));

        let name: BenchmarkName = st("dataset.name")?.parse()?;
        let method: Method = st("method")?.parse()?;
        let seed = u("seed")? as u64;
        let dataset = BenchmarkSpec {
            name,
            rho: f("dataset.rho")?,
            seed,
            n_max: u("dataset.n_max")?,
            flip_prob: f("dataset.flip_prob")?,
        };
        let head: HeadChoice = st("eval.head")?.parse()?;

        let (la, lb) = (f("train.lambda.a")?, f("train.lambda.b")?);
        let lambda = match st("train.lambda.dist")?.as_str() {
            "uniform" => LambdaDist::Uniform { a: la, b: lb },
            "beta" => LambdaDist::Beta { a: la, b: lb },
            other => return Err(choice_err("train.lambda.dist", other, &["uniform", "beta"])),
        };
        let schedule = match st("train.optimizer.schedule")?.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            "multistep" => {
                let k = "train.optimizer.milestones";
                let milestones = match get(k)? {
                    Value::Array(a) => a.iter().map(|v| usize_value(k, v)).collect::<Result<Vec<_>>>()?,
                    _ => return Err(Error::Config(format!("{k}: expected an array of epochs"))),
                };
                LrSchedule::MultiStep {
                    milestones,
                    gamma: f("train.optimizer.gamma")?,
                }
            }
            other => {
                return Err(choice_err(
                    "train.optimizer.schedule",
                    other,
                    &["constant", "cosine", "multistep"],
                ))
            }
        };
        for k in ["train.loss_uniform", "train.loss_balanced"] {
            let v = st(k)?;
            if v != "cross_entropy" {
                return Err(choice_err(k, &v, &["cross_entropy"]));
            }
        }
        let replica_refresh = match st("train.replica_refresh")?.as_str() {
            "once" => ReplicaRefresh::Once,
            "per_epoch" => ReplicaRefresh::PerEpoch,
            other => return Err(choice_err("train.replica_refresh", other, &["once", "per_epoch"])),
        };
        let augment = match st("train.augment")?.as_str() {
            "none" => Augment::None,
            "crop_flip" => Augment::CropFlip {
                pad: u("train.augment_pad")?,
            },
            other => return Err(choice_err("train.augment", other, &["none", "crop_flip"])),
        };
        let backbone: BackboneKind = st("train.backbone")?.parse()?;

        // A capacity equal to the batch size is the default, kept implicit so
        // it follows later batch-size changes.
        let batch_size = u("train.batch_size")?;
        let capacity = match m.get("train.bank_capacity") {
            Some(v) => usize_value("train.bank_capacity", v)?,
            None => batch_size,
        };
        let mut train = TrainConfig {
            epochs: u("train.epochs")?,
            warmup_epochs: u("train.warmup_epochs")?,
            freeze_aug_last_epochs: u("train.freeze_aug_last_epochs")?,
            batch_size,
            delta: f("train.delta")?,
            bank_capacity: (capacity != batch_size).then_some(capacity),
            lambda,
            lambda_per_sample: b("train.lambda_per_sample")?,
            optimizer: crate::nn::SgdConfig {
                lr: f("train.optimizer.lr")?,
                momentum: f("train.optimizer.momentum")?,
                weight_decay: f("train.optimizer.weight_decay")?,
                schedule,
            },
            replica_refresh,
            augment,
            normalize: b("train.normalize")?,
            backbone,
            embed_dim: u("train.embed_dim")?,
            mixup_alpha: f("train.mixup_alpha")?,
            mixup_uniform: method == Method::CsaMixup,
            crt_epochs: u("train.crt_epochs")?,
            seed,
            eval_each_epoch: b("train.eval_each_epoch")?,
            ..TrainConfig::default()
        };
        train.seed = seed;
        Ok(Self {
            dataset,
            method,
            head,
            train,
            output_dir: PathBuf::from(st("output_dir")?),
        })
    }

    /// The resolved config as config-file text, one key per line.
    pub fn to_toml(&self) -> String {
        self.to_flat().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn head_str(h: HeadChoice) -> &'static str {
    match h {
        HeadChoice::Uniform => "uniform",
        HeadChoice::Balanced => "balanced",
        HeadChoice::Ensemble => "ensemble",
    }
}

fn choice_err(key: &str, got: &str, valid: &[&str]) -> Error {
    Error::Config(format!("{key}: unknown value {got:?} (valid: {})", valid.join(", ")))
}

fn str_value<'a>(k: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("{k}: expected a string, got {v}")))
}

fn float_value(k: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{k}: expected a number, got {v}"))),
    }
}

fn usize_value(k: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(Error::Config(format!("{k}: expected a non-negative integer, got {v}"))),
    }
}

fn bool_value(k: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("{k}: expected true or false, got {v}")))
}

/// Dotted key/value pairs of a config file, in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, Value)>> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    Ok(out)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// `key=value` from the command line. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (k, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        for name in BenchmarkName::ALL {
            for method in Method::ALL {
                let c = ExperimentConfig::defaults(name, method);
                let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
                assert_eq!(back.to_toml(), c.to_toml());
                assert_eq!(back.method, method);
            }
        }
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = ExperimentConfig::from_toml("train.epochz = 3\nfoo.bar = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("train.epochz") && err.contains("foo.bar"), "{err}");
    }

    #[test]
    fn dataset_picks_recipe_and_overrides_apply() {
        let c = ExperimentConfig::from_toml(
            "dataset.name = \"fashion-lt\"\nmethod = \"cb-rs\"\ntrain.epochs = 3\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(c.train.optimizer, TrainConfig::fashion().optimizer);
        assert_eq!(c.train.epochs, 3);
        assert_eq!((c.dataset.seed, c.train.seed), (7, 7));
        assert_eq!(c.head, HeadChoice::Balanced);
    }

    #[test]
    fn overrides_parse_literals_and_bare_strings() {
        assert_eq!(parse_override("train.epochs=4").unwrap().1, Value::Integer(4));
        assert_eq!(
            parse_override("eval.head=ensemble").unwrap().1,
            Value::String("ensemble".into())
        );
        assert_eq!(
            parse_override("train.optimizer.milestones=[1,2]").unwrap().1,
            Value::Array(vec![Value::Integer(1), Value::Integer(2)])
        );
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("train.epochs = -1").is_err());
        assert!(ExperimentConfig::from_toml("train.augment = \"rotate\"").is_err());
        assert!(ExperimentConfig::from_toml("method = \"LWS\"").is_err());
        assert!(ExperimentConfig::from_toml("method = \"CSA\"\ntrain.warmup_epochs = 20").is_err());
        assert!(ExperimentConfig::from_toml("train.epochs = 1").is_ok());
    }
}
