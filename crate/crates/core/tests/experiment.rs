mod common;

use std::fs;

use ctxshift::evaluation::{predict, HeadChoice};
use ctxshift::experiment::{
    create_unique_dir, execute, load_run, parse_override, read_summary, write_run, Expect, ExperimentConfig, Method,
    Target, CHECKPOINT_FILE, CONFIG_FILE, FINAL_FILE, METRICS_FILE,
};
use ctxshift::lt_data::{subsample_dataset, Benchmark, BenchmarkName, BenchmarkSpec, ClassProfile};
use ctxshift::training::{EpochRecord, Phase};

fn toy_bench() -> Benchmark {
    let source = common::banded(&[30, 30, 30, 30], 8, 8, 1, 21);
    let profile = ClassProfile::explicit(vec![30, 12, 6, 3]).unwrap();
    let train = subsample_dataset(&source, &profile, 0).unwrap();
    Benchmark {
        spec: BenchmarkSpec::new(BenchmarkName::MnistLt, 10.0, 0),
        train,
        test: common::banded(&[10, 10, 10, 10], 8, 8, 1, 22),
        test_color_index: None,
    }
}

fn toy_config(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig::defaults(BenchmarkName::MnistLt, method);
    let mixup = c.train.mixup_uniform;
    c.train = common::tiny_config(0);
    c.train.mixup_uniform = mixup;
    c.set_seed(3);
    c
}

#[test]
fn every_method_round_trips_through_a_run_dir() {
    let bench = toy_bench();
    let parent = tempfile::tempdir().unwrap();
    for method in Method::ALL {
        let config = toy_config(method);
        let mut result = execute(&config, &bench).unwrap();
        assert!(result.history.last().unwrap().overall.is_some(), "{method}");
        if method == Method::Crt {
            assert_eq!(result.history.last().unwrap().phase, Phase::Retrain);
            assert_eq!(result.history.len(), config.train.epochs + config.train.crt_epochs);
        }
        let (dir, summary) = write_run(parent.path(), &config, &mut result).unwrap();
        for f in [CONFIG_FILE, METRICS_FILE, FINAL_FILE, CHECKPOINT_FILE] {
            assert!(dir.join(f).is_file(), "{method}: {f}");
        }
        assert_eq!(summary.method, method.as_str());
        assert_eq!(summary.seed, 3);
        assert_eq!(read_summary(&dir).unwrap(), summary);

        let lines = fs::read_to_string(dir.join(METRICS_FILE)).unwrap();
        let records: Vec<EpochRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records, result.history);

        let (loaded, mut model) = load_run(&dir).unwrap();
        assert_eq!(loaded, config);
        assert_eq!(
            predict(&mut model, &bench.test, config.head).unwrap(),
            predict(&mut result.model, &bench.test, config.head).unwrap()
        );
    }
}

#[test]
fn runs_are_reproducible() {
    let bench = toy_bench();
    let config = toy_config(Method::Csa);
    let a = execute(&config, &bench).unwrap();
    let b = execute(&config, &bench).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.history, b.history);
    assert_eq!(a.metrics.head, HeadChoice::Balanced);
}

#[test]
fn run_dirs_are_never_reused() {
    let parent = tempfile::tempdir().unwrap();
    let a = create_unique_dir(parent.path(), "x").unwrap();
    let b = create_unique_dir(parent.path(), "x").unwrap();
    let c = create_unique_dir(parent.path(), "x").unwrap();
    assert!(a != b && b != c && a != c);
}

#[test]
fn config_text_round_trips_and_rejects_unknown_keys() {
    let mut c = ExperimentConfig::defaults(BenchmarkName::FashionLt, Method::CsaMixup);
    c.set_seed(7);
    c.train.delta = 0.6;
    let text = c.to_toml();
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    assert!(ExperimentConfig::from_toml(&text).unwrap().train.mixup_uniform);

    let err = ExperimentConfig::from_toml("method = \"CE\"\ntrain.epoch = 3\nfoo = 1\n")
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("train.epoch") && err.contains("foo") && err.contains("train.epochs"),
        "{err}"
    );

    let (k, v) = parse_override("train.delta=0.5").unwrap();
    let c = ExperimentConfig::resolve(&[(k, v), parse_override("method=csa").unwrap()]).unwrap();
    assert_eq!((c.train.delta, c.method), (0.5, Method::Csa));
    assert!(ExperimentConfig::resolve(&[parse_override("method=nope").unwrap()]).is_err());
}

#[test]
fn targets_parse_and_describe_their_runs() {
    for t in Target::ALL {
        assert_eq!(t.as_str().parse::<Target>().unwrap(), t);
        let methods: Vec<(BenchmarkName, Method)> = t
            .runs()
            .into_iter()
            .flat_map(|(n, ms)| ms.into_iter().map(move |m| (n, m)))
            .collect();
        for (name, method, _, _) in t.cells() {
            assert!(
                methods.contains(&(name, method)),
                "{t}: cell for {method} on {name} has no run"
            );
        }
        for (name, order) in t.orderings() {
            assert!(order.iter().all(|m| methods.contains(&(name, *m))));
        }
    }
    let err = "table9".parse::<Target>().unwrap_err().to_string();
    assert!(err.contains("table1") && err.contains("figure5"), "{err}");
    assert!(Expect::Within {
        reference: 65.8,
        tol: 4.0
    }
    .holds(69.8));
    assert!(!Expect::Within {
        reference: 65.8,
        tol: 4.0
    }
    .holds(69.9));
    assert!(Expect::AtMost(2.0).holds(2.0) && !Expect::AtLeast(70.0).holds(69.9));
}

#[test]
fn bank_capacity_follows_batch_size_unless_set() {
    let c = ExperimentConfig::resolve(&[parse_override("train.batch_size=32").unwrap()]).unwrap();
    assert_eq!(c.train.bank_capacity(), 32);
    let c = ExperimentConfig::resolve(&[
        parse_override("train.batch_size=32").unwrap(),
        parse_override("train.bank_capacity=50").unwrap(),
    ])
    .unwrap();
    assert_eq!(c.train.bank_capacity(), 50);
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
}
