//! Admission of candidate tuples into the attack set.
//!
//! A candidate passes when, for every value `z`, the attribute classifier's
//! top prediction on the image edited towards `z` is `z` itself with a
//! softmax score of at least `tau`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::AttackTuple;
use crate::error::{Error, Result};
use crate::oracle::check_probability_row;
use crate::space::AttributeSpace;

/// The threshold used throughout the reference experiments.
pub const DEFAULT_TAU: f64 = 0.6;

/// Generated image tuple together with attribute-classifier scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTuple {
    pub id: String,
    pub images: BTreeMap<String, String>,
    /// value -> softmax over the attribute values for that value's image
    #[serde(default)]
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl CandidateTuple {
    pub fn into_attack_tuple(self) -> AttackTuple {
        AttackTuple {
            id: self.id,
            images: self.images,
            filter_scores: if self.scores.is_empty() {
                None
            } else {
                Some(self.scores)
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    WrongArgmax,
    BelowThreshold,
    MissingScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFailure {
    pub value: String,
    pub reason: FailureReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub tuple_id: String,
    pub accepted: bool,
    pub failures: Vec<FilterFailure>,
}

pub fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "threshold tau must lie in [0, 1], got {tau}"
        )))
    }
}

/// Decide whether one candidate depicts every attribute value convincingly.
///
/// A tied top score counts as a wrong argmax even when `z` is among the
/// tied values.
pub fn filter_tuple(
    candidate: &CandidateTuple,
    tau: f64,
    space: &AttributeSpace,
) -> Result<FilterDecision> {
    check_tau(tau)?;
    let mut failures = Vec::new();
    for (z, value) in space.values().iter().enumerate() {
        let Some(scores) = candidate.scores.get(value) else {
            failures.push(FilterFailure {
                value: value.clone(),
                reason: FailureReason::MissingScore,
            });
            continue;
        };
        check_probability_row(scores, space.k()).map_err(|reason| Error::MalformedScore {
            tuple_id: candidate.id.clone(),
            value: value.clone(),
            reason,
        })?;
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let attained = scores.iter().filter(|&&s| s == top).count();
        let reason = if scores[z] != top || attained > 1 {
            Some(FailureReason::WrongArgmax)
        } else if top < tau {
            Some(FailureReason::BelowThreshold)
        } else {
            None
        };
        if let Some(reason) = reason {
            failures.push(FilterFailure {
                value: value.clone(),
                reason,
            });
        }
    }
    Ok(FilterDecision {
        tuple_id: candidate.id.clone(),
        accepted: failures.is_empty(),
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterMode {
    /// Keep tuples passing both conditions at this threshold.
    Threshold(f64),
    /// Keep candidates unconditionally.
    Bypass,
}

#[derive(Debug, Clone)]
pub struct AttackSetBuild {
    pub tuples: Vec<AttackTuple>,
    pub decisions: Vec<FilterDecision>,
    /// Fewer than the requested number of tuples were accepted.
    pub under_target: bool,
}

/// Consume candidates in order until `target_count` are accepted or the
/// stream runs dry.
pub fn build_attack_set<I>(
    candidates: I,
    mode: FilterMode,
    target_count: usize,
    space: &AttributeSpace,
) -> Result<AttackSetBuild>
where
    I: IntoIterator<Item = CandidateTuple>,
{
    if target_count == 0 {
        return Err(Error::Config("target count must be at least 1".into()));
    }
    if let FilterMode::Threshold(tau) = mode {
        check_tau(tau)?;
    }
    let mut tuples = Vec::new();
    let mut decisions = Vec::new();
    for candidate in candidates {
        if tuples.len() == target_count {
            break;
        }
        let tuple = candidate.clone().into_attack_tuple();
        tuple.validate(space)?;
        let decision = match mode {
            FilterMode::Threshold(tau) => filter_tuple(&candidate, tau, space)?,
            FilterMode::Bypass => FilterDecision {
                tuple_id: candidate.id.clone(),
                accepted: true,
                failures: Vec::new(),
            },
        };
        if decision.accepted {
            tuples.push(tuple);
        }
        decisions.push(decision);
    }
    if tuples.is_empty() {
        return Err(Error::EmptyAttackSet(format!(
            "none of {} candidates passed the filter",
            decisions.len()
        )));
    }
    Ok(AttackSetBuild {
        under_target: tuples.len() < target_count,
        tuples,
        decisions,
    })
}
