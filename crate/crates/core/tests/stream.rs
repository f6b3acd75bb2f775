use std::collections::{BTreeMap, BTreeSet};

use cscct::learner::training_pool;
use cscct::memory::ExemplarMemory;
use cscct::stream::{build_stream, generate_synthetic, StreamProtocol, SyntheticSpec};
use proptest::prelude::*;

fn spec(num_classes: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes,
        dim: 3,
        train_per_class: 4,
        test_per_class: 2,
        class_mean_scale: 2.0,
        within_class_std: 0.5,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tasks_partition_classes_and_examples(
        per_task in 1usize..=4,
        tasks in 1usize..=5,
        half_first in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let (classes, protocol) = if half_first {
            let total = 2 * per_task * tasks;
            (total, StreamProtocol::half_first(total, per_task))
        } else {
            (per_task * tasks, StreamProtocol::equal(per_task))
        };
        let ds = generate_synthetic(&spec(classes, seed)).unwrap();
        let stream = build_stream(&ds, &protocol, seed).unwrap();
        prop_assert_eq!(stream.tasks.len(), protocol.num_tasks(classes));

        let mut seen = BTreeSet::new();
        for task in &stream.tasks {
            for c in &task.class_set {
                prop_assert!(seen.insert(*c), "class {} in two tasks", c);
            }
            let members: BTreeSet<usize> = task.class_set.iter().copied().collect();
            prop_assert!(task.train.iter().chain(&task.test).all(|e| members.contains(&e.label)));
        }
        prop_assert_eq!(seen, (0..classes).collect::<BTreeSet<_>>());
        let train: usize = stream.tasks.iter().map(|t| t.train.len()).sum();
        let test: usize = stream.tasks.iter().map(|t| t.test.len()).sum();
        prop_assert_eq!(train, ds.train.len());
        prop_assert_eq!(test, ds.test.len());
    }
}

#[test]
fn training_pool_holds_no_raw_examples_of_earlier_tasks() {
    let ds = generate_synthetic(&SyntheticSpec {
        train_per_class: 10,
        ..spec(8, 5)
    })
    .unwrap();
    let stream = build_stream(&ds, &StreamProtocol::equal(2), 5).unwrap();
    let index = stream.train_index();
    let mut memory = ExemplarMemory::new(3);
    for (t, task) in stream.tasks.iter().enumerate() {
        let pool = training_pool(task, &memory, &index).unwrap();
        let current: BTreeSet<u64> = task.train.iter().map(|e| e.id).collect();
        let stored: BTreeSet<u64> = memory.ids().collect();
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for e in &pool {
            *counts.entry(e.id).or_default() += 1;
            assert!(current.contains(&e.id) || stored.contains(&e.id), "raw example {} leaked", e.id);
        }
        assert!(counts.values().all(|&c| c == 1));
        assert_eq!(pool.len(), task.train.len() + 3 * 2 * t);
        memory.update_after_task(task, |e| Ok(e.features.clone())).unwrap();
    }
}

#[test]
fn standardization_leaves_future_tasks_out_of_the_statistics() {
    let ds = generate_synthetic(&spec(4, 9)).unwrap();
    let stream = build_stream(&ds, &StreamProtocol::equal(2), 9).unwrap();
    let (std_stream, s) = stream.standardized();
    let first = &std_stream.tasks[0].train;
    for d in 0..3 {
        let mean: f64 = first.iter().map(|e| e.features[d]).sum::<f64>() / first.len() as f64;
        let var: f64 = first.iter().map(|e| (e.features[d] - mean).powi(2)).sum::<f64>() / first.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }
    // a second task with shifted features leaves the fitted statistics alone
    let mut shifted = stream.clone();
    for e in &mut shifted.tasks[1].train {
        e.features.iter_mut().for_each(|v| *v += 100.0);
    }
    assert_eq!(shifted.standardized().1, s);
}
