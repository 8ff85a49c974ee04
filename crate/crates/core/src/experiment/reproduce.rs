//! Reference comparisons: run a method set over several seeds, average,
//! and check the averages against reference accuracies and orderings.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{execute, retrain_classifier, write_run, ExperimentConfig, Method, RunResult};
use crate::error::{Error, Result};
use crate::evaluation::{compare_runs, Comparison, GroupAcc, HeadChoice, Metrics, RunSummary};
use crate::lt_data::{load_or_build, Benchmark, BenchmarkName, BenchmarkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "table1")]
    Table1,
    #[serde(rename = "figure5")]
    Figure5,
    #[serde(rename = "table2_cifar100_100")]
    Table2Cifar100,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Table1, Target::Figure5, Target::Table2Cifar100];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Table1 => "table1",
            Target::Figure5 => "figure5",
            Target::Table2Cifar100 => "table2_cifar100_100",
        }
    }

    pub fn default_seeds(self) -> Vec<u64> {
        match self {
            Target::Table1 | Target::Figure5 => vec![0, 1, 2],
            Target::Table2Cifar100 => vec![0],
        }
    }

    /// Datasets and the methods run on each.
    pub fn runs(self) -> Vec<(BenchmarkName, Vec<Method>)> {
        use Method::*;
        match self {
            Target::Table1 => vec![
                (BenchmarkName::MnistLt, vec![Ce, Crt, CbRs]),
                (BenchmarkName::FashionLt, vec![Ce, Crt, CbRs]),
            ],
            Target::Figure5 => vec![
                (BenchmarkName::CmnistLt, vec![Ce, Crt, CbRs, Csa]),
                (BenchmarkName::MnistLt, vec![Ce, CbRs]),
            ],
            Target::Table2Cifar100 => vec![(BenchmarkName::Cifar100Lt, vec![Ce, Crt, Csa, CsaMixup])],
        }
    }

    pub fn cells(self) -> Vec<(BenchmarkName, Method, MetricKind, Expect)> {
        use BenchmarkName::*;
        use Method::*;
        use MetricKind::*;
        let within = |reference, tol| Expect::Within { reference, tol };
        match self {
            Target::Table1 => vec![
                (MnistLt, Ce, Overall, within(65.8, 4.0)),
                (MnistLt, Crt, Overall, within(82.5, 4.0)),
                (MnistLt, CbRs, Overall, within(90.8, 4.0)),
                (MnistLt, Ce, Few, Expect::AtMost(2.0)),
                (MnistLt, CbRs, Few, Expect::AtLeast(70.0)),
                (FashionLt, Ce, Overall, within(45.6, 5.0)),
                (FashionLt, Crt, Overall, within(60.3, 5.0)),
                (FashionLt, CbRs, Overall, within(80.5, 5.0)),
            ],
            Target::Figure5 => Vec::new(),
            Target::Table2Cifar100 => vec![
                (Cifar100Lt, Ce, Overall, within(38.3, 1.5)),
                (Cifar100Lt, Crt, Overall, within(42.3, 1.5)),
                (Cifar100Lt, Csa, Overall, within(45.8, 1.5)),
                (Cifar100Lt, CsaMixup, Overall, within(46.6, 1.5)),
            ],
        }
    }

    /// Method orderings by mean overall accuracy, best first.
    pub fn orderings(self) -> Vec<(BenchmarkName, Vec<Method>)> {
        use BenchmarkName::*;
        use Method::*;
        match self {
            Target::Table1 => vec![(MnistLt, vec![CbRs, Crt, Ce]), (FashionLt, vec![CbRs, Crt, Ce])],
            Target::Figure5 => vec![
                (CmnistLt, vec![Ce, CbRs]),
                (CmnistLt, vec![Crt, CbRs]),
                (MnistLt, vec![CbRs, Ce]),
                (CmnistLt, vec![Csa, CbRs]),
            ],
            Target::Table2Cifar100 => vec![(Cifar100Lt, vec![CsaMixup, Csa, Crt, Ce])],
        }
    }

    /// Head orderings within one method's runs, best first.
    pub fn head_orderings(self) -> Vec<(BenchmarkName, Method, Vec<HeadChoice>)> {
        match self {
            Target::Table2Cifar100 => vec![(
                BenchmarkName::Cifar100Lt,
                Method::Csa,
                vec![HeadChoice::Balanced, HeadChoice::Ensemble, HeadChoice::Uniform],
            )],
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|t| t.as_str()).collect();
            Error::Config(format!("unknown target {s:?} (valid targets: {})", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Overall,
    Many,
    Medium,
    Few,
}

impl MetricKind {
    /// Percentage points; `None` for an empty shot group.
    pub fn of(self, m: &Metrics) -> Option<f64> {
        let v = match self {
            MetricKind::Overall => Some(m.overall_acc),
            MetricKind::Many => m.group_acc.many,
            MetricKind::Medium => m.group_acc.medium,
            MetricKind::Few => m.group_acc.few,
        };
        v.map(|v| v * 100.0)
    }
}

/// Acceptance rule for one value in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expect {
    Within { reference: f64, tol: f64 },
    AtMost(f64),
    AtLeast(f64),
}

impl Expect {
    pub fn holds(self, v: f64) -> bool {
        match self {
            Expect::Within { reference, tol } => (v - reference).abs() <= tol,
            Expect::AtMost(hi) => v <= hi,
            Expect::AtLeast(lo) => v >= lo,
        }
    }
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Within { reference, tol } => write!(f, "{reference:.1} +/- {tol:.1}"),
            Expect::AtMost(v) => write!(f, "<= {v:.1}"),
            Expect::AtLeast(v) => write!(f, ">= {v:.1}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCheck {
    pub dataset: String,
    pub method: String,
    pub metric: MetricKind,
    pub obtained: Option<f64>,
    pub expect: Expect,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCheck {
    pub dataset: String,
    /// Best first.
    pub expected: Vec<String>,
    pub obtained: Vec<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target: Target,
    pub seeds: Vec<u64>,
    /// Seed-averaged comparisons, one per dataset.
    pub comparisons: Vec<Comparison>,
    pub cells: Vec<CellCheck>,
    pub orderings: Vec<OrderCheck>,
    pub passed: bool,
}

impl Report {
    pub fn render(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!("target {} (mean over seeds {})\n\n", self.target, seeds.join(","));
        for c in &self.comparisons {
            s.push_str(&c.render());
            s.push('\n');
        }
        let verdict = |p: bool| if p { "PASS" } else { "FAIL" };
        for c in &self.cells {
            let got = c.obtained.map_or_else(|| "n/a".to_string(), |v| format!("{v:.1}"));
            writeln!(
                s,
                "{} {} {} {:?}: {got} (expected {})",
                verdict(c.pass),
                c.dataset,
                c.method,
                c.metric,
                c.expect
            )
            .unwrap();
        }
        for o in &self.orderings {
            let got: Vec<String> = o.obtained.iter().map(|v| format!("{v:.1}")).collect();
            writeln!(
                s,
                "{} {} {} ({})",
                verdict(o.pass),
                o.dataset,
                o.expected.join(" > "),
                got.join(" / ")
            )
            .unwrap();
        }
        writeln!(s, "\noverall: {}", verdict(self.passed)).unwrap();
        s
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    pub data_root: PathBuf,
    pub cache_root: PathBuf,
    /// Where run directories go; `None` keeps everything in memory.
    pub runs_dir: Option<PathBuf>,
    pub rho: f64,
    /// Progress lines on stderr.
    pub verbose: bool,
}

type RunKey = (BenchmarkName, Method, u64);

/// Runs shared between targets: each (dataset, method, seed) trains once,
/// and classifier re-training reuses the matching uniform run.
pub struct Study {
    opts: ReproduceOptions,
    benches: BTreeMap<(BenchmarkName, u64), Benchmark>,
    runs: BTreeMap<RunKey, RunResult>,
    heads: BTreeMap<(RunKey, HeadChoice), Metrics>,
}

impl Study {
    pub fn new(opts: ReproduceOptions) -> Self {
        Self {
            opts,
            benches: BTreeMap::new(),
            runs: BTreeMap::new(),
            heads: BTreeMap::new(),
        }
    }

    fn bench(&mut self, name: BenchmarkName, seed: u64) -> Result<&Benchmark> {
        if !self.benches.contains_key(&(name, seed)) {
            let spec = BenchmarkSpec::new(name, self.opts.rho, seed);
            let (bench, _, _) = load_or_build(&spec, &self.opts.data_root, &self.opts.cache_root)?;
            self.benches.insert((name, seed), bench);
        }
        Ok(&self.benches[&(name, seed)])
    }

    fn config(&self, name: BenchmarkName, method: Method, seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::defaults(name, method);
        c.dataset.rho = self.opts.rho;
        c.set_seed(seed);
        if let Some(dir) = &self.opts.runs_dir {
            c.output_dir = dir.clone();
        }
        c
    }

    /// Final metrics of one run under the method's default head.
    pub fn metrics(&mut self, name: BenchmarkName, method: Method, seed: u64) -> Result<Metrics> {
        self.ensure(name, method, seed)?;
        Ok(self.runs[&(name, method, seed)].metrics.clone())
    }

    /// Final metrics of one run under `head`.
    pub fn head_metrics(
        &mut self,
        name: BenchmarkName,
        method: Method,
        seed: u64,
        head: HeadChoice,
    ) -> Result<Metrics> {
        self.ensure(name, method, seed)?;
        let key = (name, method, seed);
        if let Some(m) = self.heads.get(&(key, head)) {
            return Ok(m.clone());
        }
        let bench = self.benches[&(name, seed)].clone();
        let run = self.runs.get_mut(&key).expect("ensured");
        let m = run.evaluate_head(&bench, head)?;
        self.heads.insert((key, head), m.clone());
        Ok(m)
    }

    fn ensure(&mut self, name: BenchmarkName, method: Method, seed: u64) -> Result<()> {
        if self.runs.contains_key(&(name, method, seed)) {
            return Ok(());
        }
        if method == Method::Crt {
            self.ensure(name, Method::Ce, seed)?;
        }
        let config = self.config(name, method, seed);
        self.bench(name, seed)?;
        let bench = &self.benches[&(name, seed)];
        if self.opts.verbose {
            eprintln!("training {method} on {name} seed {seed}");
        }
        let start = std::time::Instant::now();
        let mut result = if method == Method::Crt {
            retrain_classifier(&self.runs[&(name, Method::Ce, seed)], &config, bench)?
        } else {
            execute(&config, bench)?
        };
        if self.opts.verbose {
            eprintln!(
                "  overall {:.1}% in {:.1}s",
                result.metrics.overall_acc * 100.0,
                start.elapsed().as_secs_f64()
            );
        }
        if let Some(dir) = &self.opts.runs_dir {
            write_run(dir, &config, &mut result)?;
        }
        self.runs.insert((name, method, seed), result);
        Ok(())
    }

    /// Seed-mean metrics of one method.
    pub fn mean_metrics(&mut self, name: BenchmarkName, method: Method, seeds: &[u64]) -> Result<Metrics> {
        let runs = seeds
            .iter()
            .map(|&s| self.metrics(name, method, s))
            .collect::<Result<Vec<_>>>()?;
        mean_metrics(&runs)
    }

    pub fn reproduce(&mut self, target: Target, seeds: &[u64]) -> Result<Report> {
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut means: BTreeMap<(BenchmarkName, Method), Metrics> = BTreeMap::new();
        let mut comparisons = Vec::new();
        for (name, methods) in target.runs() {
            let mut rows = Vec::new();
            for &method in &methods {
                let m = self.mean_metrics(name, method, seeds)?;
                rows.push(RunSummary {
                    method: method.as_str().to_string(),
                    dataset: format!("{}/{}", name, self.opts.rho),
                    seed: seeds[0],
                    metrics: m.clone(),
                });
                means.insert((name, method), m);
            }
            if rows.len() >= 2 {
                comparisons.push(compare_runs(&rows, &[])?);
            }
        }
        let cells: Vec<CellCheck> = target
            .cells()
            .into_iter()
            .map(|(name, method, metric, expect)| {
                let obtained = means.get(&(name, method)).and_then(|m| metric.of(m));
                CellCheck {
                    dataset: name.to_string(),
                    method: method.as_str().to_string(),
                    metric,
                    obtained,
                    expect,
                    pass: obtained.is_some_and(|v| expect.holds(v)),
                }
            })
            .collect();
        let mut orderings: Vec<OrderCheck> = target
            .orderings()
            .into_iter()
            .map(|(name, order)| {
                let obtained: Vec<f64> = order
                    .iter()
                    .map(|m| means.get(&(name, *m)).map_or(f64::NAN, |x| x.overall_acc * 100.0))
                    .collect();
                OrderCheck {
                    dataset: name.to_string(),
                    expected: order.iter().map(|m| m.as_str().to_string()).collect(),
                    pass: strictly_decreasing(&obtained),
                    obtained,
                }
            })
            .collect();
        for (name, method, heads) in target.head_orderings() {
            let mut obtained = Vec::new();
            for &h in &heads {
                let per_seed = seeds
                    .iter()
                    .map(|&s| self.head_metrics(name, method, s, h))
                    .collect::<Result<Vec<_>>>()?;
                obtained.push(mean_metrics(&per_seed)?.overall_acc * 100.0);
            }
            orderings.push(OrderCheck {
                dataset: name.to_string(),
                expected: heads.iter().map(|h| format!("{method}:{h:?}").to_lowercase()).collect(),
                pass: strictly_decreasing(&obtained),
                obtained,
            });
        }
        let passed = cells.iter().all(|c| c.pass) && orderings.iter().all(|o| o.pass);
        Ok(Report {
            target,
            seeds: seeds.to_vec(),
            comparisons,
            cells,
            orderings,
            passed,
        })
    }
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] > w[1])
}

/// Element-wise mean of metrics from runs on the same benchmark.
pub fn mean_metrics(runs: &[Metrics]) -> Result<Metrics> {
    let first = runs.first().ok_or_else(|| Error::invalid("no runs to average"))?;
    let n = runs.len() as f64;
    let k = first.per_class_acc.len();
    if runs.iter().any(|m| m.per_class_acc.len() != k) {
        return Err(Error::invalid("runs disagree on the number of classes"));
    }
    let mean =
        |f: &dyn Fn(&Metrics) -> Option<f64>| -> Option<f64> { runs.iter().map(f).sum::<Option<f64>>().map(|s| s / n) };
    Ok(Metrics {
        head: first.head,
        overall_acc: mean(&|m| Some(m.overall_acc)).unwrap_or(0.0),
        group_acc: GroupAcc {
            many: mean(&|m| m.group_acc.many),
            medium: mean(&|m| m.group_acc.medium),
            few: mean(&|m| m.group_acc.few),
        },
        per_class_acc: (0..k)
            .map(|c| runs.iter().map(|m| m.per_class_acc[c]).sum::<f64>() / n)
            .collect(),
        per_class_total: first.per_class_total.clone(),
        num_samples: first.num_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_target_lists_valid_ones() {
        let err = "table9".parse::<Target>().unwrap_err().to_string();
        for t in Target::ALL {
            assert!(err.contains(t.as_str()), "{err}");
        }
        assert_eq!("figure5".parse::<Target>().unwrap(), Target::Figure5);
    }

    #[test]
    fn expectations() {
        let w = Expect::Within {
            reference: 65.8,
            tol: 4.0,
        };
        assert!(w.holds(61.8) && w.holds(69.8) && !w.holds(70.0));
        assert!(Expect::AtMost(2.0).holds(2.0) && !Expect::AtMost(2.0).holds(2.1));
        assert!(Expect::AtLeast(70.0).holds(70.0) && !Expect::AtLeast(70.0).holds(69.9));
    }

    #[test]
    fn every_checked_method_is_run() {
        for t in Target::ALL {
            let runs = t.runs();
            let ran = |n: BenchmarkName, m: Method| runs.iter().any(|(d, ms)| *d == n && ms.contains(&m));
            assert!(t.cells().iter().all(|(n, m, _, _)| ran(*n, *m)));
            assert!(t.orderings().iter().all(|(n, ms)| ms.iter().all(|m| ran(*n, *m))));
        }
    }

    #[test]
    fn mean_of_identical_metrics_is_identity() {
        let m = Metrics {
            head: HeadChoice::Uniform,
            overall_acc: 0.5,
            group_acc: GroupAcc {
                many: Some(1.0),
                medium: Some(0.5),
                few: None,
            },
            per_class_acc: vec![1.0, 0.0],
            per_class_total: vec![5, 5],
            num_samples: 10,
        };
        assert_eq!(mean_metrics(&[m.clone(), m.clone()]).unwrap(), m);
    }
}
