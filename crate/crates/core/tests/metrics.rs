mod common;

use cscct::learner::{ClassifierMode, Evaluator, LabelMap};
use cscct::memory::ExemplarMemory;
use cscct::metrics::{act, apt, average_incremental_accuracy, eval_accuracy, embeddings_csv, export_embeddings, AccuracyMatrix};
use cscct::model::{Model, ModelConfig};
use cscct::rng::stream_rng;
use cscct::stream::{generate_synthetic, LabeledExample, SyntheticSpec};
use proptest::prelude::*;

#[test]
fn untrained_model_is_near_chance_on_two_balanced_classes() {
    for seed in 0..5 {
        let ds = generate_synthetic(&SyntheticSpec {
            num_classes: 2,
            dim: 4,
            train_per_class: 1,
            test_per_class: 500,
            class_mean_scale: 0.0,
            within_class_std: 1.0,
            seed,
        })
        .unwrap();
        let mut model = Model::new(4, &ModelConfig::default(), &mut stream_rng(seed, "init")).unwrap();
        model.expand_classifier(2, &mut stream_rng(seed, "classifier"));
        let labels = LabelMap::from_order(vec![0, 1]).unwrap();
        let index = Default::default();
        let eval = Evaluator::new(&model, &labels, &ExemplarMemory::new(1), &index, ClassifierMode::Linear).unwrap();
        let acc = eval_accuracy(&eval, &ds.test).unwrap();
        // identical class distributions: accuracy is exactly chance in
        // expectation, and ±0.1 is over six standard deviations at n = 1000
        assert!((0.4..=0.6).contains(&acc), "seed {seed}: {acc}");
    }
}

fn probe_model() -> Model {
    let cfg = ModelConfig {
        hidden_widths: vec![5],
        feature_dim: 4,
        feature_relu: false,
    };
    Model::new(3, &cfg, &mut stream_rng(2, "init")).unwrap()
}

fn probe_examples() -> Vec<LabeledExample> {
    let mut r = common::rng(3);
    [7u64, 2, 5]
        .iter()
        .enumerate()
        .map(|(i, &id)| LabeledExample {
            id,
            features: common::uniform(&mut r, 3, -2.0, 2.0),
            label: i,
        })
        .collect()
}

#[test]
fn embedding_dump_shape_order_and_round_trip() {
    let model = probe_model();
    let examples = probe_examples();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    export_embeddings(&model, &examples, 2, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    export_embeddings(&model, &examples, 2, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let mut reader = csv::Reader::from_path(&path).unwrap();
    assert_eq!(reader.headers().unwrap().len(), 7);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let ids: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(ids, vec![2, 5, 7]);
    for row in &rows {
        assert_eq!(row.len(), 7);
        assert_eq!(&row[2], "2");
        let ex = examples.iter().find(|e| e.id.to_string() == row[0]).unwrap();
        assert_eq!(row[1].parse::<usize>().unwrap(), ex.label);
        let expected = model.feature_vector(&ex.features).unwrap();
        for (j, v) in expected.iter().enumerate() {
            let parsed: f64 = row[3 + j].parse().unwrap();
            assert!((parsed - v).abs() < 1e-9);
        }
    }
    assert!(embeddings_csv(&model, &[], 1).is_err());
}

#[test]
fn matrix_csv_layout() {
    let m = AccuracyMatrix::from_rows(vec![vec![0.8], vec![0.6, 0.7]], vec![10, 30]).unwrap();
    assert_eq!(m.to_csv(), "t,k,accuracy,test_count\n1,1,0.8,10\n2,1,0.6,10\n2,2,0.7,30\n");
    assert_eq!(AccuracyMatrix::from_csv(&m.to_csv()).unwrap(), m);
    assert!(AccuracyMatrix::from_csv("t,k,accuracy,test_count\n1,2,0.5,3\n").is_err());
}

/// Accuracy on the union of seen test sets, from correct-answer counts.
fn union_accuracy(rows: &[Vec<f64>], counts: &[usize]) -> f64 {
    let phases: Vec<f64> = rows
        .iter()
        .map(|row| {
            let correct: f64 = row.iter().zip(counts).map(|(a, &n)| a * n as f64).sum();
            let total: usize = counts[..row.len()].iter().sum();
            correct / total as f64
        })
        .collect();
    phases.iter().sum::<f64>() / phases.len() as f64
}

fn matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..=6).prop_flat_map(|t| {
        let rows: Vec<_> = (1..=t).map(|k| prop::collection::vec(0.0..=1.0f64, k)).collect();
        (rows, prop::collection::vec(1usize..200, t))
    })
}

proptest! {
    #[test]
    fn summaries_stay_in_unit_interval((rows, counts) in matrix()) {
        let m = AccuracyMatrix::from_rows(rows.clone(), counts.clone()).unwrap();
        let avg = average_incremental_accuracy(&m).unwrap();
        prop_assert!((0.0..=1.0 + 1e-15).contains(&avg));
        prop_assert!((avg - union_accuracy(&rows, &counts)).abs() < 1e-12);
        let c = act(&m).unwrap();
        prop_assert!((0.0..=1.0 + 1e-15).contains(&c));
        if rows.len() >= 2 {
            let a = apt(&m).unwrap();
            prop_assert!((0.0..=1.0 + 1e-15).contains(&a));
        } else {
            prop_assert!(apt(&m).is_err());
        }
    }

    #[test]
    fn two_phase_closed_form(a11 in 0.0..=1.0f64, a21 in 0.0..=1.0f64, a22 in 0.0..=1.0f64, n in 1usize..100) {
        let m = AccuracyMatrix::from_rows(vec![vec![a11], vec![a21, a22]], vec![n, n]).unwrap();
        let expected = (a11 + (a21 + a22) / 2.0) / 2.0;
        prop_assert!((average_incremental_accuracy(&m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn accuracy_ignores_test_order(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut model = probe_model();
        model.expand_classifier(3, &mut stream_rng(seed, "classifier"));
        let labels = LabelMap::from_order(vec![0, 1, 2]).unwrap();
        let index = Default::default();
        let eval = Evaluator::new(&model, &labels, &ExemplarMemory::new(1), &index, ClassifierMode::Linear).unwrap();
        let mut r = common::rng(seed);
        let mut test: Vec<LabeledExample> = (0..40)
            .map(|i| LabeledExample { id: i, features: common::uniform(&mut r, 3, -2.0, 2.0), label: (i % 3) as usize })
            .collect();
        let before = eval_accuracy(&eval, &test).unwrap();
        test.shuffle(&mut r);
        prop_assert_eq!(eval_accuracy(&eval, &test).unwrap(), before);
    }
}
