//! Config-driven runs: train a method on a benchmark, evaluate it, and
//! persist everything needed to rebuild the run.
//!
//! A run directory holds
//!
//! ```text
//! config.toml          resolved config, every key
//! metrics.jsonl        one EpochRecord per line
//! final_metrics.json   RunSummary
//! model.ckpt           checkpoint (see training::save_checkpoint)
//! ```

mod config;
mod reproduce;

pub use config::{parse_override, parse_pairs, ExperimentConfig, Method};
pub use reproduce::{CellCheck, Expect, MetricKind, OrderCheck, Report, ReproduceOptions, Study, Target};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, HeadChoice, Metrics, RunSummary};
use crate::lt_data::{Benchmark, ShotGroups};
use crate::model::DualBranchModel;
use crate::training::{
    crt_finetune, load_checkpoint, save_checkpoint, train_baseline, train_csa, BaselineMethod, EpochRecord, Monitor,
    RngState,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_FILE: &str = "final_metrics.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// A trained model with its training log and final metrics.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: DualBranchModel<f32>,
    pub history: Vec<EpochRecord>,
    pub metrics: Metrics,
    pub rng_states: Vec<RngState>,
}

impl RunResult {
    /// Metrics of this model under another head.
    pub fn evaluate_head(&mut self, bench: &Benchmark, head: HeadChoice) -> Result<Metrics> {
        evaluate(&mut self.model, &bench.test, &bench.train.shot_groups, head)
    }
}

fn monitor<'a>(bench: &'a Benchmark, head: HeadChoice) -> Monitor<'a> {
    Monitor {
        test: &bench.test,
        groups: &bench.train.shot_groups,
        head,
    }
}

/// Trains and evaluates `config.method` on a loaded benchmark.
pub fn execute(config: &ExperimentConfig, bench: &Benchmark) -> Result<RunResult> {
    let train = &bench.train.images;
    let cfg = &config.train;
    let groups: &ShotGroups = &bench.train.shot_groups;
    let run = match config.method {
        Method::Crt => {
            let base = execute_baseline(config, bench, BaselineMethod::Ce)?;
            return retrain_classifier(&base, config, bench);
        }
        Method::Ce => train_baseline::<f32>(train, cfg, BaselineMethod::Ce, Some(monitor(bench, config.head)))?,
        Method::CbRs => train_baseline::<f32>(train, cfg, BaselineMethod::CbRs, Some(monitor(bench, config.head)))?,
        Method::Mixup => train_baseline::<f32>(train, cfg, BaselineMethod::Mixup, Some(monitor(bench, config.head)))?,
        Method::Csa | Method::CsaMixup => {
            let mut cfg = cfg.clone();
            cfg.mixup_uniform = config.method == Method::CsaMixup;
            train_csa::<f32>(train, &cfg, Some(monitor(bench, config.head)))?
        }
    };
    let mut model = run.model;
    let metrics = evaluate(&mut model, &bench.test, groups, config.head)?;
    Ok(RunResult {
        model,
        history: run.history,
        metrics,
        rng_states: run.rng_states,
    })
}

fn execute_baseline(config: &ExperimentConfig, bench: &Benchmark, method: BaselineMethod) -> Result<RunResult> {
    let run = train_baseline::<f32>(
        &bench.train.images,
        &config.train,
        method,
        Some(monitor(bench, method.head().into())),
    )?;
    let mut model = run.model;
    let metrics = evaluate(&mut model, &bench.test, &bench.train.shot_groups, method.head().into())?;
    Ok(RunResult {
        model,
        history: run.history,
        metrics,
        rng_states: run.rng_states,
    })
}

/// Classifier re-training on top of a finished uniform run; `base` is left
/// untouched.
pub fn retrain_classifier(base: &RunResult, config: &ExperimentConfig, bench: &Benchmark) -> Result<RunResult> {
    let mut model = base.model.clone();
    let retrain = crt_finetune(
        &mut model,
        &bench.train.images,
        &config.train,
        config.train.crt_epochs,
        Some(monitor(bench, config.head)),
    )?;
    let metrics = evaluate(&mut model, &bench.test, &bench.train.shot_groups, config.head)?;
    let mut history = base.history.clone();
    history.extend(retrain);
    Ok(RunResult {
        model,
        history,
        metrics,
        rng_states: base.rng_states.clone(),
    })
}

/// `name/rho/seed`, the identity used when comparing runs.
pub fn dataset_id(config: &ExperimentConfig) -> String {
    format!("{}/{}/{}", config.dataset.name, config.dataset.rho, config.dataset.seed)
}

/// Creates a fresh directory under `parent` named after `stem`, never
/// reusing an existing one.
pub fn create_unique_dir(parent: &Path, stem: &str) -> Result<PathBuf> {
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    for n in 0.. {
        let name = if n == 0 {
            format!("{stem}-{stamp}")
        } else {
            format!("{stem}-{stamp}-{n}")
        };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!()
}

/// Writes a finished run into a new directory under `parent`.
pub fn write_run(parent: &Path, config: &ExperimentConfig, result: &mut RunResult) -> Result<(PathBuf, RunSummary)> {
    let stem = format!(
        "{}-{}-s{}",
        config.dataset.name,
        config.method.as_str().to_ascii_lowercase(),
        config.seed()
    );
    let dir = create_unique_dir(parent, &stem)?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    };
    write(CONFIG_FILE, config.to_toml().as_bytes())?;
    let mut lines = Vec::new();
    for r in &result.history {
        serde_json::to_writer(&mut lines, r)?;
        lines.write_all(b"\n").map_err(|e| Error::io(&dir, e))?;
    }
    write(METRICS_FILE, &lines)?;
    let summary = RunSummary {
        method: config.method.as_str().to_string(),
        dataset: dataset_id(config),
        seed: config.seed(),
        metrics: result.metrics.clone(),
    };
    write(FINAL_FILE, &serde_json::to_vec_pretty(&summary)?)?;
    let epoch = result.history.last().map_or(0, |r| r.epoch + 1);
    let lr = result.history.last().map_or(config.train.optimizer.lr, |r| r.lr);
    save_checkpoint(
        &dir.join(CHECKPOINT_FILE),
        &mut result.model,
        epoch,
        lr,
        result.rng_states.clone(),
        serde_json::to_value(config)?,
    )?;
    Ok((dir, summary))
}

/// Resolved config and model of a finished run directory.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, DualBranchModel<f32>)> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config = ExperimentConfig::from_toml(&text)?;
    let ckpt = load_checkpoint::<f32>(&dir.join(CHECKPOINT_FILE))?;
    Ok((config, ckpt.model))
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(FINAL_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
