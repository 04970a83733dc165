use std::collections::BTreeSet;

use hiclpl::data::{Dataset, LabeledExample, SourceTag, SplitTag};
use hiclpl::eval::{evaluate, export_embeddings, prototype_cosines};
use hiclpl::fixture::CorrectionFixture;
use hiclpl::memory::{InitMode, MemoryBank};
use hiclpl::model::FeatureAdapter;
use hiclpl::numeric::{DenseMat, Sgd, TwoLayerNet};
use hiclpl::taxonomy::balanced;
use hiclpl::trainer::{Stage, TrainState};
use hiclpl::NodeId;

/// Adapter whose output equals its input: relu(x) − relu(−x).
fn pass_through(d: usize) -> FeatureAdapter<f64> {
    let mut w1 = DenseMat::zeros(2 * d, d);
    let mut w2 = DenseMat::zeros(d, 2 * d);
    for i in 0..d {
        w1.set(i, i, 1.0);
        w1.set(d + i, i, -1.0);
        w2.set(i, i, 1.0);
        w2.set(i, d + i, -1.0);
    }
    FeatureAdapter { net: TwoLayerNet { w1, b1: vec![0.0; 2 * d], w2, b2: vec![0.0; d] } }
}

fn fixture_state(f: &CorrectionFixture) -> TrainState {
    let protos = (0..f.taxonomy.len()).map(|i| (0..4).map(|k| if k == i % 4 { 1.0 } else { 0.0 }).collect()).collect();
    TrainState {
        taxonomy: f.taxonomy.clone(),
        flat: false,
        adapter: pass_through(4),
        head: f.head.clone(),
        bank: MemoryBank::from_prototypes(protos, f.taxonomy.depth(), 0.1, true).unwrap(),
        optimizer: Sgd::new(0.1),
        stage: Stage::Base,
        iteration: 0,
        metrics: Vec::new(),
    }
}

fn dataset_of(f: &CorrectionFixture, rows: &[(Vec<f64>, NodeId)]) -> Dataset {
    let mut d = Dataset::empty(&f.taxonomy, 4);
    for (i, (raw, leaf)) in rows.iter().enumerate() {
        d.examples.push(LabeledExample { id: i as u64, raw: raw.clone(), leaf: *leaf, split: SplitTag::Test, source: SourceTag::Synthetic });
    }
    d
}

#[test]
fn one_leaf_test_set_is_classified_perfectly() {
    let f = CorrectionFixture::build().unwrap();
    let state = fixture_state(&f);
    let leaf = f.taxonomy.subtree_leaves(f.wrong_branch).unwrap()[0];
    let rows: Vec<(Vec<f64>, NodeId)> = (0..5).map(|k| (vec![1.0, 0.0, 0.01 * k as f64, 0.5], leaf)).collect();
    let report = evaluate(&state, &dataset_of(&f, &rows), 3, &BTreeSet::new()).unwrap();
    assert_eq!(report.overall.full_path, 1.0);
    assert!(report.overall.per_level.iter().all(|&a| a == 1.0));
    assert_eq!(report.base.count, 5);
    assert_eq!(report.novel.count, 0);
}

#[test]
fn fixture_has_positive_correction_rate() {
    let f = CorrectionFixture::build().unwrap();
    let state = fixture_state(&f);
    let report = evaluate(&state, &dataset_of(&f, &[(f.query.clone(), f.truth)]), 3, &BTreeSet::new()).unwrap();
    assert_eq!(report.corrections, 1);
    assert!(report.correction_rate > 0.0);
    assert_eq!(report.greedy_full_path, 0.0);
    assert_eq!(report.overall.full_path, 1.0);
}

#[test]
fn single_example_chain_bank_has_unit_parent_child_cosine() {
    let t = balanced(&[1, 1, 1], 1);
    let bank = MemoryBank::from_features(&t, 3, &[(NodeId(3), vec![0.3, -1.0, 2.0])], 0.1, true, InitMode::Strict, 0).unwrap();
    let c = prototype_cosines(&bank, &t).unwrap();
    assert!((c.parent_child - 1.0).abs() < 1e-12);
}

#[test]
fn export_has_one_row_per_example() {
    let f = CorrectionFixture::build().unwrap();
    let state = fixture_state(&f);
    let rows: Vec<(Vec<f64>, NodeId)> = f.taxonomy.leaves().iter().map(|&l| (vec![0.5, -0.25, 1.0, 2.0], l)).collect();
    let table = export_embeddings(&state, &dataset_of(&f, &rows)).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + rows.len());
    let first: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(first.len(), 1 + 4);
    assert_eq!(first[1..].iter().map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>(), vec![0.5, -0.25, 1.0, 2.0]);
    assert_eq!(export_embeddings(&state, &dataset_of(&f, &[])).unwrap().lines().count(), 1);
}
