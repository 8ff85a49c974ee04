//! Accuracy metrics, embedding export and run comparison.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::lt_data::{ShotGroup, ShotGroups};
use crate::model::{DualBranchModel, Head};
use crate::saliency::fitting_probability;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CHUNK: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadChoice {
    Uniform,
    Balanced,
    /// Mean of both heads' softmax.
    Ensemble,
}

impl From<Head> for HeadChoice {
    fn from(h: Head) -> Self {
        match h {
            Head::Uniform => HeadChoice::Uniform,
            Head::Balanced => HeadChoice::Balanced,
        }
    }
}

impl std::str::FromStr for HeadChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(HeadChoice::Uniform),
            "balanced" => Ok(HeadChoice::Balanced),
            "ensemble" => Ok(HeadChoice::Ensemble),
            other => Err(Error::invalid(format!(
                "unknown head {other:?} (expected uniform, balanced or ensemble)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupAcc {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl GroupAcc {
    pub fn get(&self, g: ShotGroup) -> Option<f64> {
        match g {
            ShotGroup::Many => self.many,
            ShotGroup::Medium => self.medium,
            ShotGroup::Few => self.few,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub head: HeadChoice,
    pub overall_acc: f64,
    /// Unweighted mean of member classes' accuracy; `None` for an empty group.
    pub group_acc: GroupAcc,
    /// Zero for classes absent from the test set (those are left out of
    /// the group means).
    pub per_class_acc: Vec<f64>,
    pub per_class_total: Vec<usize>,
    pub num_samples: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-sample class scores under the chosen head (logits, or averaged
/// probabilities for the ensemble).
pub fn scores<T: Scalar>(model: &mut DualBranchModel<T>, images: &ImageSet, head: HeadChoice) -> Result<Tensor<T>> {
    let n = images.len();
    let k = model.num_classes;
    let per = images.image_len();
    let mut out = Vec::with_capacity(n * k);
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let x = model.prepare(&images.images[start * per..end * per], end - start)?;
        let pass = model.features(&x, false);
        match head {
            HeadChoice::Uniform => out.extend_from_slice(model.logits(Head::Uniform, &pass.features).data()),
            HeadChoice::Balanced => out.extend_from_slice(model.logits(Head::Balanced, &pass.features).data()),
            HeadChoice::Ensemble => {
                let zu = model.logits(Head::Uniform, &pass.features);
                let zb = model.logits(Head::Balanced, &pass.features);
                let half = T::of(0.5);
                for r in 0..end - start {
                    let pu = fitting_probability(zu.outer(r))?;
                    let pb = fitting_probability(zb.outer(r))?;
                    out.extend(pu.iter().zip(&pb).map(|(&a, &b)| (a + b) * half));
                }
            }
        }
    }
    Tensor::from_vec(&[n, k], out)
}

pub fn predict<T: Scalar>(model: &mut DualBranchModel<T>, images: &ImageSet, head: HeadChoice) -> Result<Vec<usize>> {
    let s = scores(model, images, head)?;
    Ok((0..images.len()).map(|r| argmax(s.outer(r))).collect())
}

/// Metrics from predictions against ground truth.
pub fn metrics_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    groups: &ShotGroups,
    head: HeadChoice,
) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if groups.groups.len() != num_classes {
        return Err(Error::invalid("shot groups do not cover every class"));
    }
    let mut total = vec![0usize; num_classes];
    let mut hit = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::InvalidLabel {
                label: y,
                classes: num_classes,
            });
        }
        total[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let per_class_acc: Vec<f64> = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    let group_mean = |g: ShotGroup| {
        let members: Vec<f64> = (0..num_classes)
            .filter(|&k| groups.of(k) == g && total[k] > 0)
            .map(|k| per_class_acc[k])
            .collect();
        (!members.is_empty()).then(|| members.iter().sum::<f64>() / members.len() as f64)
    };
    Ok(Metrics {
        head,
        overall_acc: hit.iter().sum::<usize>() as f64 / labels.len() as f64,
        group_acc: GroupAcc {
            many: group_mean(ShotGroup::Many),
            medium: group_mean(ShotGroup::Medium),
            few: group_mean(ShotGroup::Few),
        },
        per_class_acc,
        per_class_total: total,
        num_samples: labels.len(),
    })
}

pub fn evaluate<T: Scalar>(
    model: &mut DualBranchModel<T>,
    test: &ImageSet,
    groups: &ShotGroups,
    head: HeadChoice,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    let pred = predict(model, test, head)?;
    metrics_from_predictions(&pred, &test.labels, model.num_classes, groups, head)
}

/// One row per sample: id, label and extractor features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

impl EmbeddingTable {
    /// Comma-separated with a header `id,label,e0,e1,...`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = String::from("id,label");
        for d in 0..self.dim {
            write!(header, ",e{d}").expect("string write");
        }
        writeln!(out, "{header}")?;
        for (id, label, e) in &self.rows {
            write!(out, "{id},{label}")?;
            for v in e {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub fn export_embeddings<T: Scalar>(model: &mut DualBranchModel<T>, set: &ImageSet) -> Result<EmbeddingTable> {
    let per = set.image_len();
    let dim = model.extractor.feature_dim;
    let mut rows = Vec::with_capacity(set.len());
    for start in (0..set.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(set.len());
        let x = model.prepare(&set.images[start * per..end * per], end - start)?;
        let f = model.features(&x, false).features;
        for r in 0..end - start {
            rows.push((
                start + r,
                set.labels[start + r],
                f.outer(r).iter().map(|v| v.as_f64()).collect(),
            ));
        }
    }
    Ok(EmbeddingTable { dim, rows })
}

/// Final metrics of one run, tagged with what was trained on what.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    /// e.g. `mnist-lt/100/0`
    pub dataset: String,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub overall: f64,
    pub group: GroupAcc,
    /// Overall accuracy minus the first run's.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    /// Methods expected in strictly decreasing overall accuracy.
    pub expected: Vec<String>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset: String,
    pub rows: Vec<ComparisonRow>,
    pub orderings: Vec<OrderingCheck>,
}

/// Tabulates runs on one dataset and checks the requested orderings
/// (each a list of method names, best first).
pub fn compare_runs(runs: &[RunSummary], orderings: &[Vec<String>]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::invalid("need at least two runs to compare"));
    }
    let dataset = runs[0].dataset.clone();
    if let Some(r) = runs.iter().find(|r| r.dataset != dataset) {
        return Err(Error::invalid(format!(
            "runs are on different datasets ({dataset} vs {})",
            r.dataset
        )));
    }
    let base = runs[0].metrics.overall_acc;
    let rows: Vec<ComparisonRow> = runs
        .iter()
        .map(|r| ComparisonRow {
            method: r.method.clone(),
            overall: r.metrics.overall_acc,
            group: r.metrics.group_acc,
            delta: r.metrics.overall_acc - base,
        })
        .collect();
    let mut checks = Vec::new();
    for order in orderings {
        let accs: Option<Vec<f64>> = order
            .iter()
            .map(|m| rows.iter().find(|r| &r.method == m).map(|r| r.overall))
            .collect();
        let accs = accs.ok_or_else(|| Error::invalid(format!("ordering {order:?} names a method with no run")))?;
        checks.push(OrderingCheck {
            expected: order.clone(),
            holds: accs.windows(2).all(|w| w[0] > w[1]),
        });
    }
    Ok(Comparison {
        dataset,
        rows,
        orderings: checks,
    })
}

impl Comparison {
    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "   -".to_string(), |v| format!("{:5.1}", v * 100.0));
        let mut s = format!("dataset {}\n", self.dataset);
        writeln!(
            s,
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>7}",
            "method", "all", "many", "med", "few", "delta"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<10} {:>6} {:>6} {:>6} {:>6} {:>+7.1}",
                r.method,
                pct(Some(r.overall)),
                pct(r.group.many),
                pct(r.group.medium),
                pct(r.group.few),
                r.delta * 100.0
            )
            .unwrap();
        }
        for o in &self.orderings {
            writeln!(
                s,
                "{} {}",
                if o.holds { "holds " } else { "BROKEN" },
                o.expected.join(" > ")
            )
            .unwrap();
        }
        s
    }
}
