//! JSON documents exchanged between commands: attack-set manifests,
//! prediction files and metrics reports.
//!
//! Every document written here carries a `config` block echoing the
//! invocation that produced it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attack::{validate_attack_set, AttackTuple, ClassPrediction, SkippedTuple};
use crate::error::{Error, Result};
use crate::evaluation::{ConfusionMatrix, MetricsReport, ValueMetrics};
use crate::filter::CandidateTuple;
use crate::space::AttributeSpace;

pub const ATTACK_SET_FORMAT: &str = "caia-attackset/1";
pub const CANDIDATES_FORMAT: &str = "caia-candidates/1";
pub const PREDICTIONS_FORMAT: &str = "caia-predictions/1";
pub const REPORT_FORMAT: &str = "caia-report/1";

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed_file(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("documents serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_format(path: &Path, found: &str, accepted: &[&str]) -> Result<()> {
    if accepted.contains(&found) {
        Ok(())
    } else {
        Err(Error::malformed_file(
            path,
            format!("format `{found}`, expected one of {accepted:?}"),
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct RawTuple {
    id: String,
    images: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scores: Option<BTreeMap<String, Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct RawManifest {
    format: String,
    attribute: AttributeSpace,
    tuples: Vec<RawTuple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<Value>,
}

/// The attack set (or candidate pool) with its attribute definition.
#[derive(Debug, Clone)]
pub struct AttackSetManifest {
    pub attribute: AttributeSpace,
    pub tuples: Vec<AttackTuple>,
    pub config: Option<Value>,
}

impl AttackSetManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw: RawManifest = read_json(path)?;
        check_format(path, &raw.format, &[ATTACK_SET_FORMAT, CANDIDATES_FORMAT])?;
        let tuples: Vec<AttackTuple> = raw
            .tuples
            .into_iter()
            .map(|t| AttackTuple {
                id: t.id,
                images: t.images,
                filter_scores: t.scores,
            })
            .collect();
        validate_attack_set(&tuples, &raw.attribute).map_err(|e| Error::malformed_file(path, e))?;
        Ok(Self {
            attribute: raw.attribute,
            tuples,
            config: raw.config,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw = RawManifest {
            format: ATTACK_SET_FORMAT.into(),
            attribute: self.attribute.clone(),
            tuples: self
                .tuples
                .iter()
                .map(|t| RawTuple {
                    id: t.id.clone(),
                    images: t.images.clone(),
                    scores: t.filter_scores.clone(),
                })
                .collect(),
            config: self.config.clone(),
        };
        write_json(path.as_ref(), &raw)
    }

    pub fn into_candidates(self) -> (AttributeSpace, Vec<CandidateTuple>) {
        let candidates = self
            .tuples
            .into_iter()
            .map(|t| CandidateTuple {
                id: t.id,
                images: t.images,
                scores: t.filter_scores.unwrap_or_default(),
            })
            .collect();
        (self.attribute, candidates)
    }
}

#[derive(Serialize, Deserialize)]
struct RawClass {
    class_id: usize,
    predicted: String,
    tie: bool,
    advantage: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct RawPredictions {
    format: String,
    attribute: AttributeSpace,
    classes: Vec<RawClass>,
    #[serde(default)]
    skipped: Vec<SkippedTuple>,
    #[serde(default)]
    config: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionsFile {
    pub attribute: AttributeSpace,
    pub classes: Vec<ClassPrediction>,
    pub skipped: Vec<SkippedTuple>,
    pub config: Value,
}

impl PredictionsFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw: RawPredictions = read_json(path)?;
        check_format(path, &raw.format, &[PREDICTIONS_FORMAT])?;
        let space = raw.attribute;
        let classes = raw
            .classes
            .into_iter()
            .map(|c| {
                space.require_index(&c.predicted).map_err(|e| {
                    Error::malformed_file(path, format!("class {}: {e}", c.class_id))
                })?;
                let totals = space
                    .values()
                    .iter()
                    .map(|v| {
                        c.advantage.get(v).copied().ok_or_else(|| {
                            Error::malformed_file(
                                path,
                                format!("class {}: no advantage for `{v}`", c.class_id),
                            )
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClassPrediction {
                    class_id: c.class_id,
                    predicted_value: c.predicted,
                    advantage_totals: totals,
                    tie: c.tie,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            attribute: space,
            classes,
            skipped: raw.skipped,
            config: raw.config,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw = RawPredictions {
            format: PREDICTIONS_FORMAT.into(),
            attribute: self.attribute.clone(),
            classes: self
                .classes
                .iter()
                .map(|c| RawClass {
                    class_id: c.class_id,
                    predicted: c.predicted_value.clone(),
                    tie: c.tie,
                    advantage: self
                        .attribute
                        .values()
                        .iter()
                        .cloned()
                        .zip(c.advantage_totals.iter().copied())
                        .collect(),
                })
                .collect(),
            skipped: self.skipped.clone(),
            config: self.config.clone(),
        };
        write_json(path.as_ref(), &raw)
    }
}

#[derive(Serialize, Deserialize)]
struct RawReport {
    format: String,
    attribute: AttributeSpace,
    accuracy: f64,
    accuracy_std: f64,
    per_value: BTreeMap<String, ValueMetrics>,
    confusion: ConfusionMatrix,
    runs: usize,
    tie_rate: f64,
    #[serde(default)]
    config: Value,
}

pub fn write_report(path: impl AsRef<Path>, report: &MetricsReport, config: Value) -> Result<()> {
    let raw = RawReport {
        format: REPORT_FORMAT.into(),
        attribute: report.space.clone(),
        accuracy: report.accuracy,
        accuracy_std: report.accuracy_std,
        per_value: report
            .space
            .values()
            .iter()
            .cloned()
            .zip(report.per_value.iter().copied())
            .collect(),
        confusion: report.confusion.clone(),
        runs: report.runs,
        tie_rate: report.tie_rate,
        config,
    };
    write_json(path.as_ref(), &raw)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let raw: RawReport = read_json(path)?;
    check_format(path, &raw.format, &[REPORT_FORMAT])?;
    let space = raw.attribute;
    let per_value = space
        .values()
        .iter()
        .map(|v| {
            raw.per_value
                .get(v)
                .copied()
                .ok_or_else(|| Error::malformed_file(path, format!("no metrics for `{v}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if raw.confusion.k() != space.k() {
        return Err(Error::malformed_file(
            path,
            "confusion matrix does not match attribute",
        ));
    }
    Ok(MetricsReport {
        space,
        accuracy: raw.accuracy,
        accuracy_std: raw.accuracy_std,
        per_value,
        confusion: raw.confusion,
        runs: raw.runs,
        tie_rate: raw.tie_rate,
    })
}

/// Aligned plain-text rendering of a report.
pub fn report_table(report: &MetricsReport) -> String {
    fn cell(x: Option<f64>) -> String {
        x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
    }
    let width = report
        .space
        .values()
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(5);
    let mut out = format!(
        "attribute {}  runs {}  accuracy {:.4} +- {:.4}  tie rate {:.4}\n",
        report.space.name(),
        report.runs,
        report.accuracy,
        report.accuracy_std,
        report.tie_rate
    );
    out.push_str(&format!(
        "{:<width$}  {:>9}  {:>9}  {:>9}\n",
        "value", "precision", "recall", "f1"
    ));
    for (v, m) in report.space.values().iter().zip(&report.per_value) {
        out.push_str(&format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}\n",
            v,
            cell(m.precision),
            cell(m.recall),
            cell(m.f1)
        ));
    }
    out
}
