use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxshift::evaluation::{evaluate, export_embeddings, HeadChoice, Metrics};
use ctxshift::experiment::{
    execute, load_run, parse_override, parse_pairs, write_run, ExperimentConfig, ReproduceOptions, Study, Target,
};
use ctxshift::lt_data::{load_or_build, Benchmark, BenchmarkName, BenchmarkSpec, CacheStatus, ShotGroup};
use ctxshift::saliency::{background_mask, grad_cam, save_gray_png, save_image_png};
use toml::Value;

/// Long-tail training with context-shift augmentation.
#[derive(Debug, Parser)]
#[command(name = "ctxshift", version)]
struct Cli {
    /// Root of the benchmark cache.
    #[arg(long, global = true, env = "CTXSHIFT_CACHE", default_value = "cache")]
    cache_dir: PathBuf,
    /// Directory holding the raw source datasets.
    #[arg(long, global = true, env = "CTXSHIFT_DATA", default_value = "data")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build (or reuse) a cached long-tail benchmark and print its profile.
    BuildDataset(BuildArgs),
    /// Train one method and write a run directory.
    Train(TrainArgs),
    /// Re-evaluate a finished run.
    Eval(EvalArgs),
    /// Run a reference comparison and check it against tolerances.
    Reproduce(ReproduceArgs),
    /// Write Grad-CAM maps and background masks as PNG files.
    ExportGradcam(GradcamArgs),
    /// Write extractor features as CSV.
    ExportEmbeddings(EmbeddingArgs),
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    name: BenchmarkName,
    #[arg(long, default_value_t = 100.0)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest class size; defaults to the benchmark's own.
    #[arg(long)]
    n_max: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Config file of dotted `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<BenchmarkName>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parent directory for the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set train.optimizer.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the run's configured head.
    #[arg(long)]
    head: Option<HeadChoice>,
    /// Print the metrics as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    target: String,
    /// Comma-separated seeds; defaults to the target's own.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 100.0)]
    rho: f64,
    /// Parent directory for the report directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct GradcamArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Number of images, taken from the start of the split.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmbeddingArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

enum Outcome {
    Done,
    ToleranceFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ToleranceFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::BuildDataset(a) => build_dataset(&cli.data_dir, &cli.cache_dir, a),
        Command::Train(a) => train(&cli.data_dir, &cli.cache_dir, a),
        Command::Eval(a) => eval(&cli.data_dir, &cli.cache_dir, a),
        Command::Reproduce(a) => reproduce(&cli.data_dir, &cli.cache_dir, a),
        Command::ExportGradcam(a) => export_gradcam(&cli.data_dir, &cli.cache_dir, a),
        Command::ExportEmbeddings(a) => embeddings(&cli.data_dir, &cli.cache_dir, a),
    }
}

fn build_dataset(data: &Path, cache: &Path, a: BuildArgs) -> Result<Outcome> {
    let mut spec = BenchmarkSpec::new(a.name, a.rho, a.seed);
    if let Some(n) = a.n_max {
        spec.n_max = n;
    }
    let (bench, status, digest) = load_or_build(&spec, data, cache)?;
    let groups = &bench.train.shot_groups;
    println!("dataset   {} rho={} seed={}", spec.name, spec.rho, spec.seed);
    println!(
        "cache     {} ({})",
        spec.dir(cache).display(),
        match status {
            CacheStatus::Hit => "hit",
            CacheStatus::Built => "built",
        }
    );
    println!("manifest  sha256:{digest}");
    println!(
        "train     {} images, test {} images",
        bench.train.len(),
        bench.test.len()
    );
    println!("counts    {:?}", bench.train.profile.counts);
    for g in ShotGroup::ALL {
        println!("{:<9} {:?}", g.as_str(), groups.members(g));
    }
    if let Some(c) = &bench.train.cmnist {
        println!("flipped   {} of {} labels", c.flips.len(), bench.train.len());
    }
    Ok(Outcome::Done)
}

fn resolve_train_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut pairs = Vec::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        pairs.extend(parse_pairs(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    let mut flag = |k: &str, v: Value| pairs.push((k.to_string(), v));
    if let Some(n) = a.name {
        flag("dataset.name", Value::String(n.as_str().into()));
    }
    if let Some(m) = &a.method {
        flag("method", Value::String(m.clone()));
    }
    if let Some(r) = a.rho {
        flag("dataset.rho", Value::Float(r));
    }
    if let Some(s) = a.seed {
        flag("seed", Value::Integer(s as i64));
    }
    if let Some(e) = a.epochs {
        flag("train.epochs", Value::Integer(e as i64));
    }
    if let Some(o) = &a.out {
        flag("output_dir", Value::String(o.to_string_lossy().into_owned()));
    }
    for o in &a.overrides {
        pairs.push(parse_override(o)?);
    }
    Ok(ExperimentConfig::resolve(&pairs)?)
}

fn train(data: &Path, cache: &Path, a: TrainArgs) -> Result<Outcome> {
    let config = resolve_train_config(&a)?;
    let (bench, _, _) = load_or_build(&config.dataset, data, cache)?;
    eprintln!(
        "training {} on {} (rho={}, seed={})",
        config.method,
        config.dataset.name,
        config.dataset.rho,
        config.seed()
    );
    let mut result = execute(&config, &bench)?;
    let (dir, summary) = write_run(&config.output_dir, &config, &mut result)?;
    print_metrics(&summary.metrics);
    println!("run       {}", dir.display());
    Ok(Outcome::Done)
}

fn load_run_and_bench(
    data: &Path,
    cache: &Path,
    run: &Path,
) -> Result<(ExperimentConfig, ctxshift::DualBranchModelF32, Benchmark)> {
    let (config, model) = load_run(run).with_context(|| format!("loading run {}", run.display()))?;
    let (bench, _, _) = load_or_build(&config.dataset, data, cache)?;
    Ok((config, model, bench))
}

fn eval(data: &Path, cache: &Path, a: EvalArgs) -> Result<Outcome> {
    let (config, mut model, bench) = load_run_and_bench(data, cache, &a.run)?;
    let head = a.head.unwrap_or(config.head);
    let m = evaluate(&mut model, &bench.test, &bench.train.shot_groups, head)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&m)?);
    } else {
        print_metrics(&m);
    }
    Ok(Outcome::Done)
}

fn print_metrics(m: &Metrics) {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0));
    println!("head      {:?}", m.head);
    println!("overall   {}", pct(Some(m.overall_acc)));
    println!("many      {}", pct(m.group_acc.many));
    println!("medium    {}", pct(m.group_acc.medium));
    println!("few       {}", pct(m.group_acc.few));
}

fn reproduce(data: &Path, cache: &Path, a: ReproduceArgs) -> Result<Outcome> {
    let target: Target = a.target.parse()?;
    let seeds = if a.seeds.is_empty() {
        target.default_seeds()
    } else {
        a.seeds
    };
    let report_dir = ctxshift::experiment::create_unique_dir(&a.out, &format!("reproduce-{target}"))?;
    let mut study = Study::new(ReproduceOptions {
        data_root: data.to_path_buf(),
        cache_root: cache.to_path_buf(),
        runs_dir: Some(report_dir.join("runs")),
        rho: a.rho,
        verbose: true,
    });
    let report = study.reproduce(target, &seeds)?;
    let text = report.render();
    print!("{text}");
    fs::write(report_dir.join("report.txt"), &text)?;
    fs::write(report_dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    println!("report    {}", report_dir.display());
    Ok(if report.passed {
        Outcome::Done
    } else {
        Outcome::ToleranceFailed
    })
}

fn split(bench: &Benchmark, s: Split) -> &ctxshift::data::ImageSet {
    match s {
        Split::Train => &bench.train.images,
        Split::Test => &bench.test,
    }
}

fn export_gradcam(data: &Path, cache: &Path, a: GradcamArgs) -> Result<Outcome> {
    let (_, mut model, bench) = load_run_and_bench(data, cache, &a.run)?;
    let set = split(&bench, a.split);
    if a.count > set.len() {
        bail!("--count {} exceeds the {} images available", a.count, set.len());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut index = String::from("id,label,image,cam,mask\n");
    for i in 0..a.count {
        let label = set.labels[i];
        let cam = grad_cam(&mut model, set.image(i), label)?;
        let mask = background_mask(&cam);
        let names = [
            format!("{i:05}_image.png"),
            format!("{i:05}_cam.png"),
            format!("{i:05}_mask.png"),
        ];
        save_image_png(
            set.image(i),
            set.height,
            set.width,
            set.channels,
            &a.out.join(&names[0]),
        )?;
        save_gray_png(&cam.values, cam.height, cam.width, &a.out.join(&names[1]))?;
        save_gray_png(&mask, cam.height, cam.width, &a.out.join(&names[2]))?;
        index.push_str(&format!("{i},{label},{},{},{}\n", names[0], names[1], names[2]));
    }
    fs::write(a.out.join("index.csv"), index)?;
    println!("wrote {} Grad-CAM triples to {}", a.count, a.out.display());
    Ok(Outcome::Done)
}

fn embeddings(data: &Path, cache: &Path, a: EmbeddingArgs) -> Result<Outcome> {
    let (_, mut model, bench) = load_run_and_bench(data, cache, &a.run)?;
    let table = export_embeddings(&mut model, split(&bench, a.split))?;
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    table.write_csv(BufWriter::new(file))?;
    println!(
        "wrote {} rows of {} coordinates to {}",
        table.rows.len(),
        table.dim,
        a.out.display()
    );
    Ok(Outcome::Done)
}
