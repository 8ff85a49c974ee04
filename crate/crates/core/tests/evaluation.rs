mod common;

use ctxshift::evaluation::{
    argmax, compare_runs, evaluate, export_embeddings, metrics_from_predictions, predict, scores, HeadChoice, Metrics,
    RunSummary,
};
use ctxshift::lt_data::{assign_shot_groups, ClassProfile, ShotGroup, ShotGroups};
use ctxshift::saliency::fitting_probability;
use ctxshift::Head;
use proptest::prelude::*;

fn mnist_groups() -> ShotGroups {
    let profile = ClassProfile::explicit(vec![5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]).unwrap();
    assign_shot_groups(&profile, 100, 20)
}

fn balanced_labels(per_class: usize) -> Vec<usize> {
    (0..10).flat_map(|k| std::iter::repeat_n(k, per_class)).collect()
}

#[test]
fn perfect_and_constant_classifiers() {
    let groups = mnist_groups();
    let labels = balanced_labels(100);
    let m = metrics_from_predictions(&labels, &labels, 10, &groups, HeadChoice::Uniform).unwrap();
    assert_eq!(m.overall_acc, 1.0);
    for g in ShotGroup::ALL {
        assert_eq!(m.group_acc.get(g), Some(1.0));
    }
    let zeros = vec![0; labels.len()];
    let m = metrics_from_predictions(&zeros, &labels, 10, &groups, HeadChoice::Uniform).unwrap();
    assert_eq!(m.overall_acc, 0.1);
    assert_eq!(m.group_acc.many, Some(1.0 / 3.0));
    assert_eq!(m.group_acc.medium, Some(0.0));
    assert_eq!(m.group_acc.few, Some(0.0));
    assert_eq!(m.per_class_total, vec![100; 10]);
}

#[test]
fn bad_inputs_are_rejected() {
    let groups = mnist_groups();
    assert!(metrics_from_predictions(&[], &[], 10, &groups, HeadChoice::Uniform).is_err());
    assert!(metrics_from_predictions(&[0, 1], &[0], 10, &groups, HeadChoice::Uniform).is_err());
    assert!(metrics_from_predictions(&[0], &[12], 10, &groups, HeadChoice::Uniform).is_err());
    assert!(metrics_from_predictions(&[0], &[0], 9, &groups, HeadChoice::Uniform).is_err());
    let set = common::banded(&[3, 3], 4, 4, 1, 0);
    let mut model = common::tiny_config(0).init_model::<f32>(&set);
    let empty = set.select(&[]);
    let two = assign_shot_groups(&ClassProfile::explicit(vec![3, 3]).unwrap(), 100, 20);
    assert!(evaluate(&mut model, &empty, &two, HeadChoice::Uniform).is_err());
}

proptest! {
    #[test]
    fn accuracy_decomposes_over_classes_and_groups(
        pairs in prop::collection::vec((0usize..10, 0usize..10), 1..400),
    ) {
        let groups = mnist_groups();
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = metrics_from_predictions(&preds, &labels, 10, &groups, HeadChoice::Balanced).unwrap();
        let n = labels.len() as f64;
        let weighted: f64 = (0..10).map(|k| m.per_class_acc[k] * m.per_class_total[k] as f64 / n).sum();
        prop_assert!((weighted - m.overall_acc).abs() <= 1e-9);
        let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64;
        prop_assert!((hits / n - m.overall_acc).abs() <= 1e-12);
        for g in ShotGroup::ALL {
            let present: Vec<usize> = groups.members(g).into_iter().filter(|&k| m.per_class_total[k] > 0).collect();
            let want = (!present.is_empty())
                .then(|| present.iter().map(|&k| m.per_class_acc[k]).sum::<f64>() / present.len() as f64);
            match (m.group_acc.get(g), want) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[0.5f32; 4]), 0);
}

#[test]
fn each_head_is_evaluated_in_isolation() {
    let set = common::banded(&[5, 5, 5], 6, 6, 1, 1);
    let groups = assign_shot_groups(&ClassProfile::explicit(vec![5, 5, 5]).unwrap(), 100, 20);
    let mut model = common::tiny_config(3).init_model::<f64>(&set);
    model.head_balanced.weight.value[0] = 5.0;
    let uniform = evaluate(&mut model, &set, &groups, HeadChoice::Uniform).unwrap();
    let balanced = evaluate(&mut model, &set, &groups, HeadChoice::Balanced).unwrap();

    let mut poisoned = model.clone();
    poisoned
        .head_balanced
        .weight
        .value
        .iter_mut()
        .for_each(|v| *v = f64::NAN);
    assert_eq!(
        evaluate(&mut poisoned, &set, &groups, HeadChoice::Uniform).unwrap(),
        uniform
    );
    let mut poisoned = model.clone();
    poisoned
        .head_uniform
        .weight
        .value
        .iter_mut()
        .for_each(|v| *v = f64::NAN);
    assert_eq!(
        evaluate(&mut poisoned, &set, &groups, HeadChoice::Balanced).unwrap(),
        balanced
    );
}

#[test]
fn ensemble_averages_head_probabilities() {
    let set = common::banded(&[4, 4, 4], 6, 6, 1, 2);
    let mut model = common::tiny_config(4).init_model::<f64>(&set);
    let ens = scores(&mut model, &set, HeadChoice::Ensemble).unwrap();
    let zu = model.predict_logits(&set.images, set.len(), Head::Uniform).unwrap();
    let zb = model.predict_logits(&set.images, set.len(), Head::Balanced).unwrap();
    let mut want = Vec::new();
    for r in 0..set.len() {
        let pu = fitting_probability(zu.outer(r)).unwrap();
        let pb = fitting_probability(zb.outer(r)).unwrap();
        let row: Vec<f64> = pu.iter().zip(&pb).map(|(a, b)| (a + b) / 2.0).collect();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        want.push(argmax(&row));
        assert!(common::max_abs_diff(ens.outer(r), &row) < 1e-15);
    }
    assert_eq!(predict(&mut model, &set, HeadChoice::Ensemble).unwrap(), want);
}

#[test]
fn embeddings_are_complete_and_stable() {
    let set = common::banded(&[7, 5, 3], 6, 6, 1, 3);
    let mut cfg = common::tiny_config(5);
    cfg.embed_dim = 2;
    let mut model = cfg.init_model::<f32>(&set);
    let table = export_embeddings(&mut model, &set).unwrap();
    assert_eq!(table.dim, 2);
    assert_eq!(table.rows.len(), set.len());
    for (i, (id, label, e)) in table.rows.iter().enumerate() {
        assert_eq!((*id, *label, e.len()), (i, set.labels[i], 2));
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    table.write_csv(&mut a).unwrap();
    export_embeddings(&mut model, &set).unwrap().write_csv(&mut b).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("id,label,e0,e1\n"));
    assert_eq!(text.lines().count(), set.len() + 1);
}

fn summary(method: &str, dataset: &str, acc: f64) -> RunSummary {
    let groups = mnist_groups();
    let labels = balanced_labels(10);
    let correct = (acc * labels.len() as f64).round() as usize;
    let preds: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| if i < correct { y } else { (y + 1) % 10 })
        .collect();
    let metrics: Metrics = metrics_from_predictions(&preds, &labels, 10, &groups, HeadChoice::Uniform).unwrap();
    RunSummary {
        method: method.into(),
        dataset: dataset.into(),
        seed: 0,
        metrics,
    }
}

#[test]
fn comparing_runs() {
    let same = compare_runs(&[summary("CE", "d/100/0", 0.5), summary("CE2", "d/100/0", 0.5)], &[]).unwrap();
    assert!(same.rows.iter().all(|r| r.delta == 0.0));
    let runs = [
        summary("CE", "d/100/0", 0.5),
        summary("CRT", "d/100/0", 0.7),
        summary("CB_RS", "d/100/0", 0.8),
    ];
    let order = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let c = compare_runs(&runs, &[order(&["CB_RS", "CRT", "CE"]), order(&["CE", "CRT"])]).unwrap();
    assert!((c.rows[2].delta - 0.3).abs() < 1e-12);
    assert!(c.orderings[0].holds);
    assert!(!c.orderings[1].holds);
    assert!(c.render().contains("CB_RS > CRT > CE"));
    assert!(compare_runs(&runs, &[order(&["MIXUP", "CE"])]).is_err());
    assert!(compare_runs(&[summary("CE", "a/1/0", 0.5), summary("CRT", "b/1/0", 0.5)], &[]).is_err());
    assert!(compare_runs(&runs[..1], &[]).is_err());
}
