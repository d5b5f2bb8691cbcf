//! Scoring predictions against ground truth, plus the multi-run and
//! sample-count ablation protocols.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackTuple, ClassPrediction};
use crate::error::{Error, Result};
use crate::oracle::Oracle;
use crate::rng::keyed_rng;
use crate::space::AttributeSpace;

/// Known attribute value of each class.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroundTruth(BTreeMap<usize, String>);

#[derive(Serialize, Deserialize)]
struct TruthRow {
    class_id: usize,
    value: String,
}

impl GroundTruth {
    pub fn new(entries: impl IntoIterator<Item = (usize, String)>) -> Self {
        Self(entries.into_iter().collect())
    }

    pub fn get(&self, class_id: usize) -> Option<&str> {
        self.0.get(&class_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &String)> {
        self.0.iter()
    }

    /// Read a `class_id,value` CSV.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?;
        if headers != vec!["class_id", "value"] {
            return Err(Error::malformed_file(
                path,
                format!(
                    "expected header `class_id,value`, got `{}`",
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            ));
        }
        let mut map = BTreeMap::new();
        for row in reader.deserialize::<TruthRow>() {
            let row = row.map_err(|e| csv_error(path, e))?;
            if map.insert(row.class_id, row.value).is_some() {
                return Err(Error::malformed_file(
                    path,
                    format!("class {} listed twice", row.class_id),
                ));
            }
        }
        Ok(Self(map))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        for (&class_id, value) in &self.0 {
            writer
                .serialize(TruthRow {
                    class_id,
                    value: value.clone(),
                })
                .map_err(|e| csv_error(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::malformed_file(path, e)
    }
}

/// Counts with rows = true value and columns = predicted value, both in
/// attribute-space order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfusionMatrix(Vec<Vec<u64>>);

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self(vec![vec![0; k]; k])
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Evaluation(
                "confusion matrix must be square and non-empty".into(),
            ));
        }
        Ok(Self(counts))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.0[truth][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.0
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.0[i][i]).sum()
    }

    fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

pub fn confusion(
    predictions: &[ClassPrediction],
    truth: &GroundTruth,
    space: &AttributeSpace,
) -> Result<ConfusionMatrix> {
    let missing: Vec<String> = predictions
        .iter()
        .filter(|p| truth.get(p.class_id).is_none())
        .map(|p| p.class_id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Evaluation(format!(
            "classes without ground truth: {}",
            missing.join(", ")
        )));
    }
    let mut m = ConfusionMatrix::zeros(space.k());
    for p in predictions {
        let t = truth.get(p.class_id).expect("checked above");
        let i = space.index_of(t).ok_or_else(|| {
            Error::Evaluation(format!("class {}: unknown true value `{t}`", p.class_id))
        })?;
        let j = space.index_of(&p.predicted_value).ok_or_else(|| {
            Error::Evaluation(format!(
                "class {}: unknown predicted value `{}`",
                p.class_id, p.predicted_value
            ))
        })?;
        m.0[i][j] += 1;
    }
    Ok(m)
}

/// One-vs-rest scores of a single attribute value. `None` marks a ratio
/// with an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub space: AttributeSpace,
    pub accuracy: f64,
    pub accuracy_std: f64,
    /// In attribute-space order.
    pub per_value: Vec<ValueMetrics>,
    /// Summed over runs.
    pub confusion: ConfusionMatrix,
    pub runs: usize,
    /// Fraction of classes whose prediction came from a tie.
    pub tie_rate: f64,
}

impl MetricsReport {
    pub fn value_metrics(&self, value: &str) -> Option<&ValueMetrics> {
        self.space.index_of(value).map(|i| &self.per_value[i])
    }

    /// Metrics recomputed from the pooled confusion matrix.
    pub fn pooled(&self) -> Result<MetricsReport> {
        metrics(&self.confusion, &self.space)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(confusion: &ConfusionMatrix, space: &AttributeSpace) -> Result<MetricsReport> {
    let k = confusion.k();
    if k != space.k() {
        return Err(Error::Evaluation(format!(
            "{k}x{k} confusion matrix for a {}-value attribute",
            space.k()
        )));
    }
    let total = confusion.total();
    if total == 0 {
        return Err(Error::Evaluation("confusion matrix is empty".into()));
    }
    let per_value = (0..k)
        .map(|i| {
            let tp = confusion.get(i, i);
            let predicted: u64 = (0..k).map(|t| confusion.get(t, i)).sum();
            let actual: u64 = confusion.rows()[i].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ValueMetrics {
                precision,
                recall,
                f1,
            }
        })
        .collect();
    Ok(MetricsReport {
        space: space.clone(),
        accuracy: confusion.trace() as f64 / total as f64,
        accuracy_std: 0.0,
        per_value,
        confusion: confusion.clone(),
        runs: 1,
        tie_rate: 0.0,
    })
}

/// Confusion, metrics and tie rate of one attack run.
pub fn evaluate(
    predictions: &[ClassPrediction],
    truth: &GroundTruth,
    space: &AttributeSpace,
) -> Result<MetricsReport> {
    let m = confusion(predictions, truth, space)?;
    let mut report = metrics(&m, space)?;
    report.tie_rate =
        predictions.iter().filter(|p| p.tie).count() as f64 / predictions.len() as f64;
    Ok(report)
}

/// Arithmetic mean, offset by the first element so that identical inputs
/// give back exactly that input.
fn mean(xs: &[f64]) -> Option<f64> {
    let first = *xs.first()?;
    Some(first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64)
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    mean(&xs.flatten().collect::<Vec<_>>())
}

/// Mean of per-report metrics, population std of accuracy, summed
/// confusion. Undefined per-value scores are left out of their mean.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Evaluation("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| !r.space.same_values(&first.space)) {
        return Err(Error::Evaluation(format!(
            "reports over different attributes: `{}` vs `{}`",
            first.space.name(),
            r.space.name()
        )));
    }
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    let accuracies: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let accuracy = mean(&accuracies).expect("non-empty");
    let accuracy_std = (accuracies
        .iter()
        .map(|a| (a - accuracy).powi(2))
        .sum::<f64>()
        / accuracies.len() as f64)
        .sqrt();
    let per_value = (0..first.space.k())
        .map(|i| ValueMetrics {
            precision: mean_defined(reports.iter().map(|r| r.per_value[i].precision)),
            recall: mean_defined(reports.iter().map(|r| r.per_value[i].recall)),
            f1: mean_defined(reports.iter().map(|r| r.per_value[i].f1)),
        })
        .collect();
    let mut confusion = ConfusionMatrix::zeros(first.space.k());
    for r in reports {
        confusion.add(&r.confusion);
    }
    let tie_rates: Vec<f64> = reports.iter().map(|r| r.tie_rate).collect();
    Ok(MetricsReport {
        space: first.space.clone(),
        accuracy,
        accuracy_std,
        per_value,
        confusion,
        runs: reports.iter().map(|r| r.runs).sum(),
        tie_rate: mean(&tie_rates).expect("non-empty"),
    })
}

/// Split into `m` disjoint subsets: seeded shuffle, then round-robin by
/// position.
pub fn partition_subsets(
    attack_set: &[AttackTuple],
    m: usize,
    seed: u64,
) -> Result<Vec<Vec<AttackTuple>>> {
    if m == 0 || m > attack_set.len() {
        return Err(Error::Config(format!(
            "cannot split {} tuples into {m} subsets",
            attack_set.len()
        )));
    }
    let mut order: Vec<usize> = (0..attack_set.len()).collect();
    order.shuffle(&mut keyed_rng(seed, "partition", &[]));
    let mut subsets = vec![Vec::with_capacity(attack_set.len() / m + 1); m];
    for (pos, &i) in order.iter().enumerate() {
        subsets[pos % m].push(attack_set[i].clone());
    }
    Ok(subsets)
}

/// Attack accuracy at one attack-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub size: usize,
    pub repeats: usize,
    pub mean_accuracy: f64,
    pub std: f64,
    /// Subsets were pairwise disjoint; otherwise each repeat drew its own
    /// sample without replacement.
    pub disjoint: bool,
    pub accuracies: Vec<f64>,
}

/// Repeat the attack on random subsets of each requested size.
pub fn ablate(
    attack_set: &[AttackTuple],
    oracle: &dyn Oracle,
    space: &AttributeSpace,
    truth: &GroundTruth,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<AblationPoint>> {
    let n = attack_set.len();
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Config("no ablation sizes given".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > n) {
        return Err(Error::Config(format!(
            "ablation size {bad} outside 1..={n} (attack set size)"
        )));
    }
    let mut curve = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let size_key = (size as u64).to_le_bytes();
        let disjoint = repeats * size <= n;
        let mut reports = Vec::with_capacity(repeats);
        let mut shared: Vec<usize> = (0..n).collect();
        if disjoint {
            shared.shuffle(&mut keyed_rng(seed, "ablate", &[&size_key]));
        }
        for r in 0..repeats {
            let picked: Vec<usize> = if disjoint {
                shared[r * size..(r + 1) * size].to_vec()
            } else {
                let mut order: Vec<usize> = (0..n).collect();
                let rep_key = (r as u64).to_le_bytes();
                order.shuffle(&mut keyed_rng(
                    seed,
                    "ablate-sample",
                    &[&size_key, &rep_key],
                ));
                order.truncate(size);
                order
            };
            let subset: Vec<AttackTuple> = picked.iter().map(|&i| attack_set[i].clone()).collect();
            let outcome = run_attack(&subset, oracle, space, None)?;
            reports.push(evaluate(&outcome.predictions, truth, space)?);
        }
        let agg = aggregate_runs(&reports)?;
        curve.push(AblationPoint {
            size,
            repeats,
            mean_accuracy: agg.accuracy,
            std: agg.accuracy_std,
            disjoint,
            accuracies: reports.iter().map(|r| r.accuracy).collect(),
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab() -> AttributeSpace {
        AttributeSpace::new("x", ["a", "b"]).unwrap()
    }

    fn pred(class_id: usize, v: &str) -> ClassPrediction {
        ClassPrediction {
            class_id,
            predicted_value: v.into(),
            advantage_totals: vec![],
            tie: false,
        }
    }

    fn truth(vals: &[&str]) -> GroundTruth {
        GroundTruth::new(vals.iter().enumerate().map(|(i, v)| (i, v.to_string())))
    }

    #[test]
    fn hand_counted_confusion() {
        let preds = [pred(0, "a"), pred(1, "b"), pred(2, "b"), pred(3, "b")];
        let m = confusion(&preds, &truth(&["a", "a", "b", "b"]), &ab()).unwrap();
        assert_eq!(m.rows(), &[vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let s = ab();
        let t = truth(&["a", "b", "a", "b"]);
        let perfect: Vec<_> = (0..4).map(|c| pred(c, t.get(c).unwrap())).collect();
        let m = confusion(&perfect, &t, &s).unwrap();
        assert_eq!(m.rows(), &[vec![2, 0], vec![0, 2]]);
        let r = metrics(&m, &s).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for v in &r.per_value {
            assert_eq!(
                (v.precision, v.recall, v.f1),
                (Some(1.0), Some(1.0), Some(1.0))
            );
        }

        let constant: Vec<_> = (0..4).map(|c| pred(c, "a")).collect();
        let m = confusion(&constant, &t, &s).unwrap();
        assert_eq!(m.rows(), &[vec![2, 0], vec![2, 0]]);
        let r = metrics(&m, &s).unwrap();
        assert_eq!(r.per_value[1].precision, None);
        assert_eq!(r.per_value[1].f1, None);
        assert_eq!(r.per_value[1].recall, Some(0.0));
    }

    #[test]
    fn hand_computed_metrics() {
        let m = ConfusionMatrix::from_counts(vec![vec![1, 1], vec![0, 2]]).unwrap();
        let r = metrics(&m, &ab()).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_value[0].precision, Some(1.0));
        assert_eq!(r.per_value[0].recall, Some(0.5));
        assert_eq!(r.per_value[1].precision, Some(2.0 / 3.0));
        assert_eq!(r.per_value[1].recall, Some(1.0));
        let f1_b = r.per_value[1].f1.unwrap();
        assert!((f1_b - 0.8).abs() < 1e-15);
    }

    #[test]
    fn missing_truth_lists_class_ids() {
        let err = confusion(&[pred(0, "a"), pred(7, "b")], &truth(&["a"]), &ab()).unwrap_err();
        assert!(err.to_string().contains('7'));
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(metrics(&ConfusionMatrix::zeros(2), &ab()).is_err());
    }

    #[test]
    fn aggregation() {
        let s = ab();
        let r8 = {
            let mut r = metrics(
                &ConfusionMatrix::from_counts(vec![vec![4, 1], vec![1, 4]]).unwrap(),
                &s,
            )
            .unwrap();
            r.accuracy = 0.8;
            r
        };
        let r9 = {
            let mut r = metrics(
                &ConfusionMatrix::from_counts(vec![vec![5, 0], vec![1, 4]]).unwrap(),
                &s,
            )
            .unwrap();
            r.accuracy = 0.9;
            r
        };
        let agg = aggregate_runs(&[r8.clone(), r9]).unwrap();
        assert!((agg.accuracy - 0.85).abs() < 1e-15);
        assert!((agg.accuracy_std - 0.05).abs() < 1e-15);
        assert_eq!(agg.runs, 2);
        assert_eq!(agg.confusion.rows(), &[vec![9, 1], vec![2, 8]]);

        assert_eq!(aggregate_runs(std::slice::from_ref(&r8)).unwrap(), r8);
        let nine = aggregate_runs(&vec![r8.clone(); 9]).unwrap();
        assert_eq!(nine.accuracy, r8.accuracy);
        assert_eq!(nine.accuracy_std, 0.0);
        assert_eq!(nine.runs, 9);
    }

    #[test]
    fn aggregation_rejects_mixed_spaces() {
        let m = ConfusionMatrix::from_counts(vec![vec![1, 0], vec![0, 1]]).unwrap();
        let a = metrics(&m, &ab()).unwrap();
        let b = metrics(&m, &AttributeSpace::new("y", ["a", "b"]).unwrap()).unwrap();
        assert!(aggregate_runs(&[a, b]).is_err());
    }

    #[test]
    fn truth_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.csv");
        let t = truth(&["a", "b", "b"]);
        t.write_csv(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "class_id,value\n0,a\n1,b\n2,b\n"
        );
        assert_eq!(GroundTruth::read_csv(&p).unwrap(), t);

        std::fs::write(&p, "id,value\n0,a\n").unwrap();
        assert!(GroundTruth::read_csv(&p).is_err());
    }

    fn tuples(n: usize) -> Vec<AttackTuple> {
        (0..n)
            .map(|i| AttackTuple {
                id: format!("t{i:04}"),
                images: BTreeMap::new(),
                filter_scores: None,
            })
            .collect()
    }

    #[test]
    fn nine_subsets_of_a_hundred() {
        let parts = partition_subsets(&tuples(900), 9, 1).unwrap();
        assert!(parts.iter().all(|p| p.len() == 100));
        let whole = partition_subsets(&tuples(10), 1, 1).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].len(), 10);
        assert!(partition_subsets(&tuples(3), 4, 1).is_err());
        assert!(partition_subsets(&tuples(3), 0, 1).is_err());
    }
}
