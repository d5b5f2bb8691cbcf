//! Synthetic target model for end-to-end checks.
//!
//! Each class carries a hidden attribute value. The logit of class `y` for
//! the image of tuple `t` depicting value `v` is
//!
//! ```text
//! logit[y] = base[y] + mu * [v == truth(y)] + confounder(t, v) + noise(y, t, v)
//! ```
//!
//! with `base ~ N(0, base_std^2)` fixed per class, a confounder
//! `~ N(0, sigma_c^2)` shared by all classes for one image, and i.i.d.
//! `noise ~ N(0, sigma^2)`. Every draw comes from a ChaCha stream keyed by
//! the seed and the draw's indices, so any logit can be recomputed in
//! isolation and in any order.

mod server;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attack::AttackTuple;
use crate::error::{Error, Result};
use crate::evaluation::GroundTruth;
use crate::rng::keyed_rng as stream;
use crate::space::AttributeSpace;

pub use server::{serve, SimServer};

/// Model name the simulator reports in its metadata.
pub const SIMULATOR_MODEL_NAME: &str = "caia-sim/1";

/// Logit bonus of the intended value in the simulated attribute classifier.
const FILTER_MARGIN: f64 = 2.0;
const FILTER_NOISE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_classes: usize,
    pub attribute: AttributeSpace,
    /// Logit bonus for images matching a class's attribute value.
    pub mu: f64,
    /// Per-image, per-class noise std.
    pub sigma: f64,
    /// Per-image confounder std, shared by all classes.
    pub sigma_c: f64,
    /// Per-class base logit std.
    pub base_std: f64,
    pub num_tuples: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: bad scenario config: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.attribute.k();
        if self.num_classes < 2 {
            return Err(Error::Config("scenario needs at least 2 classes".into()));
        }
        if !self.num_classes.is_multiple_of(k) {
            return Err(Error::Config(format!(
                "{} classes cannot be split evenly over {k} attribute values",
                self.num_classes
            )));
        }
        if self.num_tuples == 0 {
            return Err(Error::Config("scenario needs at least one tuple".into()));
        }
        for (name, v) in [
            ("mu", self.mu),
            ("sigma", self.sigma),
            ("sigma_c", self.sigma_c),
            ("base_std", self.base_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    config: ScenarioConfig,
    /// Attribute value index of each class.
    truth: Vec<usize>,
    base: Vec<f64>,
}

impl Scenario {
    pub fn generate(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let k = config.attribute.k();
        let mut truth: Vec<usize> = (0..config.num_classes).map(|c| c % k).collect();
        truth.shuffle(&mut stream(config.seed, "truth", &[]));
        let mut rng = stream(config.seed, "base", &[]);
        let base = (0..config.num_classes)
            .map(|_| scaled_normal(&mut rng, config.base_std))
            .collect();
        Ok(Self {
            config,
            truth,
            base,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn space(&self) -> &AttributeSpace {
        &self.config.attribute
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::new(
            self.truth
                .iter()
                .enumerate()
                .map(|(c, &v)| (c, self.space().value(v).to_string())),
        )
    }

    /// Attribute value index of a class.
    pub fn truth_index(&self, class_id: usize) -> usize {
        self.truth[class_id]
    }

    /// Tuple ids `t0000`, `t0001`, ... padded so that string order equals
    /// numeric order.
    pub fn tuple_id(&self, i: usize) -> String {
        let width = self
            .config
            .num_tuples
            .saturating_sub(1)
            .to_string()
            .len()
            .max(4);
        format!("t{i:0width$}")
    }

    /// Attack set whose image references are the simulator payloads
    /// `<tuple_id>/<value>`.
    pub fn attack_set(&self) -> Vec<AttackTuple> {
        (0..self.config.num_tuples)
            .map(|i| {
                let id = self.tuple_id(i);
                let images = self
                    .space()
                    .values()
                    .iter()
                    .map(|v| (v.clone(), format!("{id}/{v}")))
                    .collect();
                AttackTuple {
                    id,
                    images,
                    filter_scores: None,
                }
            })
            .collect()
    }

    /// Pre-softmax logits over all classes for one attack image.
    pub fn simulate_logits(&self, tuple_id: &str, value: &str) -> Result<Vec<f64>> {
        let v = self.space().require_index(value)?;
        let c = &self.config;
        let mut rng = stream(c.seed, "image", &[tuple_id.as_bytes(), value.as_bytes()]);
        let confounder = scaled_normal(&mut rng, c.sigma_c);
        Ok((0..c.num_classes)
            .map(|y| {
                let bonus = if self.truth[y] == v { c.mu } else { 0.0 };
                self.base[y] + bonus + confounder + scaled_normal(&mut rng, c.sigma)
            })
            .collect())
    }

    /// Softmax scores of a simulated attribute classifier for one image:
    /// the intended value gets a fixed logit margin plus unit noise.
    pub fn attribute_scores(&self, tuple_id: &str, value: &str) -> Result<Vec<f64>> {
        let v = self.space().require_index(value)?;
        let mut rng = stream(
            self.config.seed,
            "filter",
            &[tuple_id.as_bytes(), value.as_bytes()],
        );
        let logits: Vec<f64> = (0..self.space().k())
            .map(|i| {
                let margin = if i == v { FILTER_MARGIN } else { 0.0 };
                margin + scaled_normal(&mut rng, FILTER_NOISE)
            })
            .collect();
        Ok(softmax(&logits))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// `std * N(0, 1)`, exactly `0.0` when `std` is zero.
fn scaled_normal(rng: &mut ChaCha12Rng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    if std == 0.0 {
        0.0
    } else {
        std * z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(num_classes: usize, values: &[&str], seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            num_classes,
            attribute: AttributeSpace::new("attr", values.iter().copied()).unwrap(),
            mu: 1.0,
            sigma: 0.5,
            sigma_c: 0.5,
            base_std: 1.0,
            num_tuples: 10,
            seed,
        }
    }

    #[test]
    fn ground_truth_is_balanced() {
        let s = Scenario::generate(config(8, &["a", "b", "c", "d"], 1)).unwrap();
        let gt = s.ground_truth();
        for v in ["a", "b", "c", "d"] {
            assert_eq!(gt.iter().filter(|(_, x)| x.as_str() == v).count(), 2);
        }
    }

    #[test]
    fn indivisible_class_count_is_rejected() {
        let err = Scenario::generate(config(10, &["a", "b", "c", "d"], 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn regeneration_is_identical() {
        let a = Scenario::generate(config(40, &["a", "b", "c", "d"], 7)).unwrap();
        let b = Scenario::generate(config(40, &["a", "b", "c", "d"], 7)).unwrap();
        assert_eq!(a, b);
        let la = a.simulate_logits("t0003", "c").unwrap();
        let lb = b.simulate_logits("t0003", "c").unwrap();
        assert_eq!(
            la.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            lb.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn seeds_change_ground_truth() {
        let truths: Vec<GroundTruth> = (0..20)
            .map(|s| {
                Scenario::generate(config(40, &["a", "b", "c", "d"], s))
                    .unwrap()
                    .ground_truth()
            })
            .collect();
        for i in 0..truths.len() {
            for j in i + 1..truths.len() {
                assert_ne!(truths[i], truths[j], "seeds {i} and {j}");
            }
        }
    }

    #[test]
    fn degenerate_parameters_give_zero_logits() {
        let mut c = config(8, &["a", "b"], 3);
        c.mu = 0.0;
        c.sigma = 0.0;
        c.sigma_c = 0.0;
        c.base_std = 0.0;
        let s = Scenario::generate(c).unwrap();
        for v in ["a", "b"] {
            let l = s.simulate_logits("t0000", v).unwrap();
            assert!(l.iter().all(|x| x.to_bits() == 0.0f64.to_bits()));
        }
    }

    #[test]
    fn noise_free_bonus_marks_matching_classes() {
        let mut c = config(8, &["a", "b"], 3);
        c.sigma = 0.0;
        c.sigma_c = 0.0;
        c.base_std = 0.0;
        let s = Scenario::generate(c).unwrap();
        let l = s.simulate_logits("x", "b").unwrap();
        for (y, x) in l.iter().enumerate() {
            let expected = if s.truth_index(y) == 1 { 1.0 } else { 0.0 };
            assert_eq!(*x, expected);
        }
    }

    #[test]
    fn unknown_value_is_a_domain_error() {
        let s = Scenario::generate(config(8, &["a", "b"], 3)).unwrap();
        assert!(matches!(
            s.simulate_logits("t", "z"),
            Err(Error::UnknownValue(_))
        ));
    }

    #[test]
    fn attribute_scores_are_probabilities() {
        let s = Scenario::generate(config(8, &["a", "b", "c", "d"], 3)).unwrap();
        for t in 0..20 {
            let row = s.attribute_scores(&s.tuple_id(t), "c").unwrap();
            crate::oracle::check_probability_row(&row, 4).unwrap();
        }
    }

    #[test]
    fn tuple_ids_sort_numerically() {
        let mut c = config(8, &["a", "b"], 3);
        c.num_tuples = 12000;
        let s = Scenario::generate(c).unwrap();
        assert_eq!(s.tuple_id(7), "t00007");
        assert!(s.tuple_id(999) < s.tuple_id(1000));
    }
}
