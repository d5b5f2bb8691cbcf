//! Relative-advantage scoring and per-class attribute prediction.
//!
//! For one attack tuple and one target class, the variant with the highest
//! logit receives the gap to the runner-up logit and every other variant
//! receives zero. Gaps are summed per class over all tuples and the value
//! with the largest total is the inferred attribute of that class.
//!
//! Logits must be pre-softmax. Softmax outputs cannot be detected
//! numerically, so passing them through a provider silently changes the
//! scoring: the gaps get squashed into `[0, 1)` and classes with confident
//! predictions dominate less.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{ImageQuery, Oracle};
use crate::space::AttributeSpace;

/// One attack sample: `k` images of the same base picture, each edited to
/// depict a different attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTuple {
    pub id: String,
    /// value label -> image reference (path or URI, opaque here)
    pub images: BTreeMap<String, String>,
    /// Attribute-classifier scores that admitted this tuple, when known.
    #[serde(default, rename = "scores", skip_serializing_if = "Option::is_none")]
    pub filter_scores: Option<BTreeMap<String, Vec<f64>>>,
}

impl AttackTuple {
    pub fn new(
        id: impl Into<String>,
        images: BTreeMap<String, String>,
        space: &AttributeSpace,
    ) -> Result<Self> {
        let tuple = Self {
            id: id.into(),
            images,
            filter_scores: None,
        };
        tuple.validate(space)?;
        Ok(tuple)
    }

    pub fn validate(&self, space: &AttributeSpace) -> Result<()> {
        let malformed = |value: &str, reason: &str| Error::MalformedTuple {
            tuple_id: Some(self.id.clone()),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(malformed("", "empty tuple id"));
        }
        for v in space.values() {
            if !self.images.contains_key(v) {
                return Err(malformed(v, "no image for this value"));
            }
        }
        if let Some(extra) = self.images.keys().find(|k| space.index_of(k).is_none()) {
            return Err(malformed(extra, "value is not part of the attribute space"));
        }
        Ok(())
    }

    pub fn image(&self, value: &str) -> Option<&str> {
        self.images.get(value).map(String::as_str)
    }
}

/// Checks that tuple ids are unique and every tuple covers the space.
pub fn validate_attack_set(tuples: &[AttackTuple], space: &AttributeSpace) -> Result<()> {
    let mut seen = HashSet::with_capacity(tuples.len());
    for t in tuples {
        t.validate(space)?;
        if !seen.insert(t.id.as_str()) {
            return Err(Error::Config(format!("duplicate tuple id `{}`", t.id)));
        }
    }
    Ok(())
}

/// Per-tuple advantage over the `k` attribute values of one class.
///
/// At most one entry is positive; all entries are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector(Vec<f64>);

impl AdvantageVector {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index and size of the single positive entry, if any.
    pub fn winner(&self) -> Option<(usize, f64)> {
        self.0
            .iter()
            .enumerate()
            .find(|(_, &a)| a > 0.0)
            .map(|(i, &a)| (i, a))
    }

    /// Build from already-validated logits ordered like the attribute space.
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut out = vec![0.0; logits.len()];
        let (top, gap) = top_gap(logits.iter().copied());
        out[top] = gap;
        Self(out)
    }
}

/// Index of the highest logit and its margin over the second highest.
///
/// The margin is computed with multiplicity, so a maximum attained twice
/// yields a margin of exactly zero.
#[inline]
pub(crate) fn top_gap(logits: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut top = 0;
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for (i, x) in logits.enumerate() {
        if x > first {
            second = first;
            first = x;
            top = i;
        } else if x > second {
            second = x;
        }
    }
    (top, first - second)
}

/// Relative advantage of one tuple for one class, from the class logit of
/// each variant keyed by attribute value.
pub fn relative_advantage(
    logits_by_value: &BTreeMap<String, f64>,
    space: &AttributeSpace,
) -> Result<AdvantageVector> {
    let malformed = |value: &str, reason: &str| Error::MalformedTuple {
        tuple_id: None,
        value: value.to_string(),
        reason: reason.to_string(),
    };
    if let Some(extra) = logits_by_value.keys().find(|v| space.index_of(v).is_none()) {
        return Err(malformed(extra, "value is not part of the attribute space"));
    }
    let mut ordered = Vec::with_capacity(space.k());
    for v in space.values() {
        match logits_by_value.get(v) {
            None => return Err(malformed(v, "missing logit")),
            Some(x) if !x.is_finite() => return Err(malformed(v, "non-finite logit")),
            Some(&x) => ordered.push(x),
        }
    }
    Ok(AdvantageVector::from_logits(&ordered))
}

/// Running per-class sums of relative advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageTable {
    num_classes: usize,
    k: usize,
    totals: Vec<f64>,
    tuples_seen: usize,
}

impl AdvantageTable {
    pub fn new(num_classes: usize, k: usize) -> Self {
        Self {
            num_classes,
            k,
            totals: vec![0.0; num_classes * k],
            tuples_seen: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn tuples_seen(&self) -> usize {
        self.tuples_seen
    }

    pub fn row(&self, class_id: usize) -> &[f64] {
        &self.totals[class_id * self.k..(class_id + 1) * self.k]
    }

    /// Add one advantage vector into a class row.
    ///
    /// Callers adding whole tuples by hand should follow up with
    /// [`count_tuple`](Self::count_tuple); [`add_tuple`](Self::add_tuple)
    /// does both.
    pub fn accumulate(&mut self, class_id: usize, adv: &AdvantageVector) -> Result<()> {
        if class_id >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class_id,
                num_classes: self.num_classes,
            });
        }
        if adv.len() != self.k {
            return Err(Error::Shape(format!(
                "advantage vector has {} entries, table expects {}",
                adv.len(),
                self.k
            )));
        }
        let k = self.k;
        for (t, a) in self.totals[class_id * k..(class_id + 1) * k]
            .iter_mut()
            .zip(adv.as_slice())
        {
            *t += a;
        }
        Ok(())
    }

    pub fn count_tuple(&mut self) {
        self.tuples_seen += 1;
    }

    /// Score every class from one tuple's logit vectors, one per attribute
    /// value in space order, each of length `num_classes`.
    ///
    /// Only the winning entry of each class is added; the zero entries
    /// would leave the sums bit-for-bit unchanged.
    pub fn add_tuple(&mut self, logits_by_value: &[&[f64]]) -> Result<()> {
        if logits_by_value.len() != self.k {
            return Err(Error::Shape(format!(
                "tuple has {} logit vectors, expected {}",
                logits_by_value.len(),
                self.k
            )));
        }
        if let Some(bad) = logits_by_value.iter().find(|r| r.len() != self.num_classes) {
            return Err(Error::Shape(format!(
                "logit vector of length {}, expected {}",
                bad.len(),
                self.num_classes
            )));
        }
        for y in 0..self.num_classes {
            let (top, gap) = top_gap(logits_by_value.iter().map(|row| row[y]));
            self.totals[y * self.k + top] += gap;
        }
        self.tuples_seen += 1;
        Ok(())
    }
}

/// Inferred attribute value of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    pub class_id: usize,
    pub predicted_value: String,
    /// Summed advantages in attribute-space order.
    pub advantage_totals: Vec<f64>,
    /// The maximum total was reached by more than one value; the lowest
    /// index among them was chosen.
    pub tie: bool,
}

pub fn predict(table: &AdvantageTable, space: &AttributeSpace) -> Result<Vec<ClassPrediction>> {
    if table.tuples_seen == 0 {
        return Err(Error::EmptyAttackSet(
            "no attack tuple contributed to the advantage table".into(),
        ));
    }
    if table.k != space.k() {
        return Err(Error::Shape(format!(
            "table has {} values per class, attribute `{}` has {}",
            table.k,
            space.name(),
            space.k()
        )));
    }
    Ok((0..table.num_classes)
        .map(|class_id| {
            let row = table.row(class_id);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            let tie = row.iter().filter(|&&v| v == row[best]).count() > 1;
            ClassPrediction {
                class_id,
                predicted_value: space.value(best).to_string(),
                advantage_totals: row.to_vec(),
                tie,
            }
        })
        .collect())
}

/// A tuple that was dropped from the attack, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTuple {
    pub tuple_id: String,
    pub reason: String,
    #[serde(skip)]
    pub transport: bool,
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub predictions: Vec<ClassPrediction>,
    pub table: AdvantageTable,
    /// Ids of the tuples that were scored, in accumulation order.
    pub used: Vec<String>,
    pub skipped: Vec<SkippedTuple>,
}

/// Tuples fetched per provider round trip. Bounds memory, not results.
const TUPLES_PER_FETCH: usize = 256;

/// Infer the attribute of every class of the oracle's model.
///
/// Tuples are taken in ascending id order (the first `sample_limit` of them
/// when set). Each image is queried once and its logit vector scores all
/// classes. A tuple with any unavailable logit record is skipped whole.
pub fn run_attack(
    attack_set: &[AttackTuple],
    oracle: &dyn Oracle,
    space: &AttributeSpace,
    sample_limit: Option<usize>,
) -> Result<AttackOutcome> {
    if attack_set.is_empty() {
        return Err(Error::EmptyAttackSet("attack set has no tuples".into()));
    }
    if let Some(limit) = sample_limit {
        if limit == 0 || limit > attack_set.len() {
            return Err(Error::Config(format!(
                "sample limit {limit} outside 1..={}",
                attack_set.len()
            )));
        }
    }
    let mut ordered: Vec<&AttackTuple> = attack_set.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = ordered.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Config(format!("duplicate tuple id `{}`", w[0].id)));
    }
    ordered.truncate(sample_limit.unwrap_or(ordered.len()));

    let num_classes = oracle.metadata()?.num_classes;
    let k = space.k();
    let mut table = AdvantageTable::new(num_classes, k);
    let mut used = Vec::with_capacity(ordered.len());
    let mut skipped = Vec::new();

    for chunk in ordered.chunks(TUPLES_PER_FETCH) {
        // Tuples not covering the space are dropped before querying.
        let mut queried = Vec::with_capacity(chunk.len());
        let mut queries = Vec::with_capacity(chunk.len() * k);
        for &tuple in chunk {
            if let Err(e) = tuple.validate(space) {
                skipped.push(skip(tuple, &e));
                continue;
            }
            queried.push(tuple);
            for v in space.values() {
                queries.push(ImageQuery {
                    tuple_id: tuple.id.clone(),
                    value: v.clone(),
                    image: tuple.images[v].clone(),
                });
            }
        }
        if queries.is_empty() {
            continue;
        }
        let rows = oracle.fetch_rows(&queries)?;
        if rows.len() != queries.len() {
            return Err(Error::Protocol(format!(
                "oracle returned {} rows for {} queries",
                rows.len(),
                queries.len()
            )));
        }
        for (tuple, group) in queried.iter().zip(rows.chunks(k)) {
            match tuple_rows(tuple, group, space, num_classes)? {
                Ok(vectors) => {
                    table.add_tuple(&vectors)?;
                    used.push(tuple.id.clone());
                }
                Err(e) => skipped.push(skip(tuple, &e)),
            }
        }
    }

    for s in &skipped {
        warn!("skipped tuple `{}`: {}", s.tuple_id, s.reason);
    }
    if used.is_empty() {
        if skipped.iter().all(|s| s.transport) {
            return Err(Error::Transport {
                attempts: crate::oracle::http::MAX_ATTEMPTS,
                message: format!("no tuple could be fetched ({} skipped)", skipped.len()),
            });
        }
        return Err(Error::EmptyAttackSet(format!(
            "all {} tuples were skipped",
            skipped.len()
        )));
    }
    let predictions = predict(&table, space)?;
    Ok(AttackOutcome {
        predictions,
        table,
        used,
        skipped,
    })
}

fn skip(tuple: &AttackTuple, e: &Error) -> SkippedTuple {
    SkippedTuple {
        tuple_id: tuple.id.clone(),
        reason: e.to_string(),
        transport: matches!(e, Error::Transport { .. }),
    }
}

/// Outer error aborts the run; inner error skips the tuple.
fn tuple_rows<'a>(
    tuple: &AttackTuple,
    group: &'a [Result<Vec<f64>>],
    space: &AttributeSpace,
    num_classes: usize,
) -> Result<Result<Vec<&'a [f64]>>> {
    let mut vectors = Vec::with_capacity(group.len());
    for (value, row) in space.values().iter().zip(group) {
        match row {
            Ok(row) if row.len() != num_classes => {
                return Err(Error::Protocol(format!(
                    "logit row for ({}, {value}) has length {}, model reports {num_classes} classes",
                    tuple.id,
                    row.len()
                )));
            }
            Ok(row) if row.iter().any(|x| !x.is_finite()) => {
                return Ok(Err(Error::MalformedTuple {
                    tuple_id: Some(tuple.id.clone()),
                    value: value.clone(),
                    reason: "non-finite logit".into(),
                }));
            }
            Ok(row) => vectors.push(row.as_slice()),
            Err(e) if e.is_row_local() => {
                return Ok(Err(clone_row_error(e)));
            }
            Err(e) => return Err(Error::Protocol(e.to_string())),
        }
    }
    Ok(Ok(vectors))
}

fn clone_row_error(e: &Error) -> Error {
    match e {
        Error::Transport { attempts, message } => Error::Transport {
            attempts: *attempts,
            message: message.clone(),
        },
        Error::MissingRecords(keys) => Error::MissingRecords(keys.clone()),
        Error::MalformedTuple {
            tuple_id,
            value,
            reason,
        } => Error::MalformedTuple {
            tuple_id: tuple_id.clone(),
            value: value.clone(),
            reason: reason.clone(),
        },
        other => Error::Protocol(other.to_string()),
    }
}
