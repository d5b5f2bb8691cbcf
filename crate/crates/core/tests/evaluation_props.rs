//! Evaluation protocol properties.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use caia_core::evaluation::{
    ablate, aggregate_runs, confusion, evaluate, metrics, partition_subsets,
};
use caia_core::oracle::SimulatorOracle;
use caia_core::{run_attack, AttributeSpace, ClassPrediction, GroundTruth, Scenario};
use proptest::prelude::*;

fn pred(class_id: usize, v: &str) -> ClassPrediction {
    ClassPrediction {
        class_id,
        predicted_value: v.into(),
        advantage_totals: vec![],
        tie: false,
    }
}

#[test]
fn hand_counted_metrics() {
    let space = AttributeSpace::new("x", ["a", "b"]).unwrap();
    let truth = GroundTruth::new([
        (0, "a".into()),
        (1, "a".into()),
        (2, "b".into()),
        (3, "b".into()),
    ]);
    let preds = [pred(0, "a"), pred(1, "b"), pred(2, "b"), pred(3, "b")];
    let m = confusion(&preds, &truth, &space).unwrap();
    let r = metrics(&m, &space).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.per_value[0].precision, Some(1.0));
    assert_eq!(r.per_value[0].recall, Some(0.5));
    assert_eq!(r.per_value[1].precision, Some(2.0 / 3.0));
    assert_eq!(r.per_value[1].recall, Some(1.0));
}

#[test]
fn single_full_size_ablation_equals_direct_run() {
    let scenario = Arc::new(Scenario::generate(common::recovery_config(4)).unwrap());
    let oracle = SimulatorOracle::new(scenario.clone());
    let set = scenario.attack_set();
    let truth = scenario.ground_truth();
    let curve = ablate(&set, &oracle, scenario.space(), &truth, &[set.len()], 1, 17).unwrap();
    let direct = run_attack(&set, &oracle, scenario.space(), None).unwrap();
    let report = evaluate(&direct.predictions, &truth, scenario.space()).unwrap();
    assert_eq!(curve[0].mean_accuracy, report.accuracy);
    assert_eq!(curve[0].std, 0.0);
}

#[test]
fn aggregation_of_disjoint_runs() {
    let scenario = Arc::new(Scenario::generate(common::recovery_config(8)).unwrap());
    let oracle = SimulatorOracle::new(scenario.clone());
    let truth = scenario.ground_truth();
    let subsets = partition_subsets(&scenario.attack_set(), 10, 3).unwrap();
    let reports: Vec<_> = subsets
        .iter()
        .map(|s| {
            let out = run_attack(s, &oracle, scenario.space(), None).unwrap();
            evaluate(&out.predictions, &truth, scenario.space()).unwrap()
        })
        .collect();
    let agg = aggregate_runs(&reports).unwrap();
    assert_eq!(agg.runs, 10);
    assert_eq!(agg.confusion.total(), 10 * 100);
    let (m, s) = common::mean_std(&reports.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    assert!((agg.accuracy - m).abs() < 1e-12);
    assert!((agg.accuracy_std - s).abs() < 1e-12);
    let pooled = agg.pooled().unwrap();
    assert!(
        (pooled.accuracy - m).abs() < 1e-12,
        "equal-size runs pool to the mean"
    );
}

proptest! {
    #[test]
    fn partition_is_disjoint_and_covering(n in 1usize..60, m_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let scenario = Scenario::generate(common::scenario_config(4, 1.0, 0.5, n, 1)).unwrap();
        let set = scenario.attack_set();
        let m = 1 + ((n - 1) as f64 * m_frac) as usize;
        let parts = partition_subsets(&set, m, seed).unwrap();
        prop_assert_eq!(parts.len(), m);
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let ids: BTreeSet<String> = parts.iter().flatten().map(|t| t.id.clone()).collect();
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(parts, partition_subsets(&set, m, seed).unwrap());
    }

    #[test]
    fn micro_scores_match_accuracy(cells in proptest::collection::vec(0u64..20, 9)) {
        prop_assume!(cells.iter().sum::<u64>() > 0);
        let space = AttributeSpace::new("x", ["a", "b", "c"]).unwrap();
        let counts: Vec<Vec<u64>> = cells.chunks(3).map(<[u64]>::to_vec).collect();
        let m = caia_core::evaluation::ConfusionMatrix::from_counts(counts).unwrap();
        let r = metrics(&m, &space).unwrap();
        // micro precision == micro recall == accuracy
        let tp: u64 = (0..3).map(|i| m.get(i, i)).sum();
        prop_assert_eq!(r.accuracy, tp as f64 / m.total() as f64);
        for (i, v) in r.per_value.iter().enumerate() {
            let col: u64 = (0..3).map(|t| m.get(t, i)).sum();
            let row: u64 = m.rows()[i].iter().sum();
            prop_assert_eq!(v.precision.is_none(), col == 0);
            prop_assert_eq!(v.recall.is_none(), row == 0);
            if let (Some(p), Some(r), Some(f)) = (v.precision, v.recall, v.f1) {
                let want = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
                prop_assert!((f - want).abs() < 1e-12);
            }
        }
    }
}
