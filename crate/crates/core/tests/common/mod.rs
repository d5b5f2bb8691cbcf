#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use caia_core::oracle::{ImageQuery, ModelMetadata};
use caia_core::{AttributeSpace, Error, Oracle, Result, ScenarioConfig};

pub fn hair() -> AttributeSpace {
    AttributeSpace::new("hair_color", ["black", "blond", "brown", "gray"]).unwrap()
}

pub fn scenario_config(
    num_classes: usize,
    mu: f64,
    sigma: f64,
    num_tuples: usize,
    seed: u64,
) -> ScenarioConfig {
    ScenarioConfig {
        num_classes,
        attribute: hair(),
        mu,
        sigma,
        sigma_c: 0.5,
        base_std: 1.0,
        num_tuples,
        seed,
    }
}

/// Recovery scenario: 100 classes, k=4, mu=1, sigma=0.5, sigma_c=0.5,
/// base_std=1, 100 tuples.
pub fn recovery_config(seed: u64) -> ScenarioConfig {
    scenario_config(100, 1.0, 0.5, 100, seed)
}

/// In-memory logit table with optional holes, counting every query.
pub struct MemoryOracle {
    pub num_classes: usize,
    pub rows: HashMap<(String, String), Vec<f64>>,
    pub queries: AtomicUsize,
    pub calls: Mutex<Vec<usize>>,
}

impl MemoryOracle {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            rows: HashMap::new(),
            queries: AtomicUsize::new(0),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn insert(&mut self, tuple: &str, value: &str, logits: Vec<f64>) {
        self.rows
            .insert((tuple.to_string(), value.to_string()), logits);
    }
}

impl Oracle for MemoryOracle {
    fn metadata(&self) -> Result<ModelMetadata> {
        Ok(ModelMetadata {
            num_classes: self.num_classes,
            name: "memory".into(),
            input_size: [0, 0],
        })
    }

    fn fetch_rows(&self, queries: &[ImageQuery]) -> Result<Vec<Result<Vec<f64>>>> {
        self.queries.fetch_add(queries.len(), Ordering::SeqCst);
        self.calls.lock().unwrap().push(queries.len());
        Ok(queries
            .iter()
            .map(|q| {
                self.rows
                    .get(&q.key())
                    .cloned()
                    .ok_or_else(|| Error::MissingRecords(vec![q.key()]))
            })
            .collect())
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (
        m,
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}
