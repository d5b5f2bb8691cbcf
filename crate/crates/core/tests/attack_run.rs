//! `run_attack` over in-memory and simulated oracles.

mod common;

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use caia_core::oracle::{ImageQuery, ModelMetadata, SimulatorOracle};
use caia_core::{run_attack, AttackTuple, AttributeSpace, Error, Oracle, Result, Scenario};
use common::{hair, MemoryOracle};

fn tuple(id: &str, space: &AttributeSpace) -> AttackTuple {
    let images = space
        .values()
        .iter()
        .map(|v| (v.clone(), format!("{id}/{v}.png")))
        .collect();
    AttackTuple::new(id, images, space).unwrap()
}

/// Two classes, k=2; every tuple favours class 0 -> "f" and class 1 -> "m".
fn two_class_oracle(ids: &[&str]) -> MemoryOracle {
    let mut o = MemoryOracle::new(2);
    for id in ids {
        o.insert(id, "f", vec![2.0, 0.0]);
        o.insert(id, "m", vec![1.0, 0.5]);
    }
    o
}

fn gender() -> AttributeSpace {
    AttributeSpace::new("gender", ["f", "m"]).unwrap()
}

#[test]
fn noise_free_single_tuple_is_perfect() {
    let s = gender();
    let o = two_class_oracle(&["t0"]);
    let out = run_attack(&[tuple("t0", &s)], &o, &s, None).unwrap();
    let preds: Vec<&str> = out
        .predictions
        .iter()
        .map(|p| p.predicted_value.as_str())
        .collect();
    assert_eq!(preds, ["f", "m"]);
    assert_eq!(out.table.row(0), &[1.0, 0.0]);
    assert_eq!(out.table.row(1), &[0.0, 0.5]);
}

#[test]
fn one_query_per_image_scores_every_class() {
    let s = gender();
    let ids: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
    let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
    let o = two_class_oracle(&refs);
    let set: Vec<_> = refs.iter().map(|id| tuple(id, &s)).collect();
    run_attack(&set, &o, &s, None).unwrap();
    assert_eq!(o.queries.load(Ordering::SeqCst), 10 * 2);
}

#[test]
fn sample_limit_takes_lowest_ids() {
    let s = gender();
    let ids = ["t3", "t0", "t2", "t1", "t4"];
    let o = two_class_oracle(&ids);
    let set: Vec<_> = ids.iter().map(|id| tuple(id, &s)).collect();
    let out = run_attack(&set, &o, &s, Some(3)).unwrap();
    assert_eq!(out.used, ["t0", "t1", "t2"]);
    assert_eq!(out.table.tuples_seen(), 3);
    assert!(matches!(
        run_attack(&set, &o, &s, Some(0)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        run_attack(&set, &o, &s, Some(6)),
        Err(Error::Config(_))
    ));
}

#[test]
fn partial_tuples_are_skipped_whole() {
    let s = gender();
    let mut o = two_class_oracle(&["t0", "t2"]);
    // t1 has only one of its two records and a misleading one at that
    o.insert("t1", "m", vec![100.0, 100.0]);
    let set: Vec<_> = ["t0", "t1", "t2"].iter().map(|id| tuple(id, &s)).collect();
    let out = run_attack(&set, &o, &s, None).unwrap();
    assert_eq!(out.used, ["t0", "t2"]);
    assert_eq!(out.skipped.len(), 1);
    assert_eq!(out.skipped[0].tuple_id, "t1");
    assert_eq!(out.table.row(0), &[2.0, 0.0]);
}

#[test]
fn nothing_usable_is_an_empty_attack_set() {
    let s = gender();
    let o = MemoryOracle::new(2);
    let set = vec![tuple("t0", &s)];
    assert!(matches!(
        run_attack(&set, &o, &s, None),
        Err(Error::EmptyAttackSet(_))
    ));
    assert!(matches!(
        run_attack(&[], &o, &s, None),
        Err(Error::EmptyAttackSet(_))
    ));
}

#[test]
fn duplicate_ids_are_rejected() {
    let s = gender();
    let o = two_class_oracle(&["t0"]);
    let set = vec![tuple("t0", &s), tuple("t0", &s)];
    assert!(matches!(
        run_attack(&set, &o, &s, None),
        Err(Error::Config(_))
    ));
}

/// Reports 3 classes but answers with rows of 2.
struct LyingOracle(MemoryOracle);

impl Oracle for LyingOracle {
    fn metadata(&self) -> Result<ModelMetadata> {
        let mut m = self.0.metadata()?;
        m.num_classes = 3;
        Ok(m)
    }

    fn fetch_rows(&self, q: &[ImageQuery]) -> Result<Vec<Result<Vec<f64>>>> {
        self.0.fetch_rows(q)
    }
}

#[test]
fn class_count_mismatch_is_a_protocol_error() {
    let s = gender();
    let o = LyingOracle(two_class_oracle(&["t0"]));
    let err = run_attack(&[tuple("t0", &s)], &o, &s, None).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn order_of_the_input_set_does_not_matter() {
    let scenario = Arc::new(Scenario::generate(common::recovery_config(11)).unwrap());
    let oracle = SimulatorOracle::new(scenario.clone());
    let mut set = scenario.attack_set();
    let a = run_attack(&set, &oracle, &hair(), None).unwrap();
    set.reverse();
    let b = run_attack(&set, &oracle, &hair(), None).unwrap();
    assert_eq!(a.table, b.table);
    assert_eq!(a.predictions, b.predictions);
}

#[test]
fn tuples_outside_the_space_are_skipped() {
    let s = gender();
    let o = two_class_oracle(&["t0", "t1"]);
    let mut bad = tuple("t1", &s);
    bad.images = BTreeMap::from([("f".to_string(), "x".to_string())]);
    let out = run_attack(&[tuple("t0", &s), bad], &o, &s, None).unwrap();
    assert_eq!(out.used, ["t0"]);
    assert_eq!(out.skipped[0].tuple_id, "t1");
}
