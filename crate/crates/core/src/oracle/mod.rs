//! Black-box access to target-model logits and attribute-classifier scores.
//!
//! Three providers implement [`Oracle`]: a JSON Lines logit file, a remote
//! HTTP oracle, and the in-process simulator. All of them return rows in
//! request order and are stateless per request.

pub mod file;
pub mod http;
pub mod sim;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{Scenario, ScenarioConfig};
use crate::space::AttributeSpace;

pub use file::{FileOracle, LogitFileWriter, LOGIT_FILE_FORMAT};
pub use http::HttpOracle;
pub use sim::SimulatorOracle;

/// Tolerance on the sum of a probability row.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

/// One image to send to the oracle, with the attack key it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageQuery {
    pub tuple_id: String,
    pub value: String,
    pub image: String,
}

impl ImageQuery {
    pub fn key(&self) -> (String, String) {
        (self.tuple_id.clone(), self.value.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub num_classes: usize,
    pub name: String,
    pub input_size: [u32; 2],
}

/// Logit rows aligned to their request keys.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    keys: Vec<(String, String)>,
    num_classes: usize,
    data: Vec<f64>,
}

impl LogitBatch {
    pub fn new(
        keys: Vec<(String, String)>,
        rows: Vec<Vec<f64>>,
        num_classes: usize,
    ) -> Result<Self> {
        if keys.len() != rows.len() {
            return Err(Error::Protocol(format!(
                "{} rows for {} keys",
                rows.len(),
                keys.len()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * num_classes);
        for (key, row) in keys.iter().zip(&rows) {
            check_logit_row(row, num_classes)
                .map_err(|e| Error::Protocol(format!("({}, {}): {e}", key.0, key.1)))?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            keys,
            num_classes,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn keys(&self) -> &[(String, String)] {
        &self.keys
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.num_classes.max(1))
    }
}

/// A black-box model answering logit and attribute-score queries.
pub trait Oracle: Send + Sync {
    fn metadata(&self) -> Result<ModelMetadata>;

    /// One outcome per query, in query order.
    ///
    /// The outer error aborts the caller (protocol breaches, bad setup).
    /// Inner errors are local to their rows: missing records, transport
    /// failures that exhausted retries, undecodable images.
    fn fetch_rows(&self, queries: &[ImageQuery]) -> Result<Vec<Result<Vec<f64>>>>;

    /// All-or-nothing variant of [`fetch_rows`](Self::fetch_rows).
    fn fetch_logits(&self, queries: &[ImageQuery]) -> Result<LogitBatch> {
        if queries.is_empty() {
            return Err(Error::Config("logit request list is empty".into()));
        }
        let num_classes = self.metadata()?.num_classes;
        let rows = self.fetch_rows(queries)?;
        let mut missing = Vec::new();
        let mut first_err = None;
        let mut ok_rows = Vec::with_capacity(rows.len());
        for row in rows {
            match row {
                Ok(r) => ok_rows.push(r),
                Err(Error::MissingRecords(keys)) => missing.extend(keys),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingRecords(missing));
        }
        if let Some(e) = first_err {
            return Err(e);
        }
        LogitBatch::new(
            queries.iter().map(ImageQuery::key).collect(),
            ok_rows,
            num_classes,
        )
    }

    /// Softmax rows of the attribute classifier, one per query, each of
    /// length `k` in space order.
    fn fetch_attribute_scores(
        &self,
        _space: &AttributeSpace,
        _queries: &[ImageQuery],
    ) -> Result<Vec<Vec<f64>>> {
        Err(Error::Config(format!(
            "oracle `{}` does not provide attribute scores",
            self.metadata().map(|m| m.name).unwrap_or_default()
        )))
    }
}

pub(crate) fn check_logit_row(row: &[f64], num_classes: usize) -> Result<()> {
    if row.len() != num_classes {
        return Err(Error::Protocol(format!(
            "logit row has length {}, model reports {num_classes} classes",
            row.len()
        )));
    }
    if row.iter().any(|x| !x.is_finite()) {
        return Err(Error::Protocol(
            "logit row contains a non-finite entry".into(),
        ));
    }
    Ok(())
}

/// Validate a probability row over `k` values.
pub fn check_probability_row(row: &[f64], k: usize) -> std::result::Result<(), String> {
    if row.len() != k {
        return Err(format!("expected {k} probabilities, got {}", row.len()));
    }
    if let Some(x) = row
        .iter()
        .find(|x| !x.is_finite() || **x < 0.0 || **x > 1.0)
    {
        return Err(format!("probability {x} outside [0, 1]"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
        return Err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    File,
    Http,
    Simulator,
}

impl std::str::FromStr for OracleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "file" => Ok(OracleKind::File),
            "http" => Ok(OracleKind::Http),
            "simulator" | "sim" => Ok(OracleKind::Simulator),
            other => Err(Error::Config(format!("unknown oracle kind `{other}`"))),
        }
    }
}

/// Where the oracle lives and how to talk to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDescriptor {
    pub kind: OracleKind,
    /// Logit file path, base URL, or scenario config path.
    pub locator: String,
    /// Expected class count; filled in from metadata when opened.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_batch_size() -> usize {
    32
}

fn default_in_flight() -> usize {
    4
}

impl OracleDescriptor {
    pub fn new(kind: OracleKind, locator: impl Into<String>) -> Self {
        Self {
            kind,
            locator: locator.into(),
            num_classes: None,
            batch_size: default_batch_size(),
            max_in_flight: default_in_flight(),
        }
    }

    /// Connect to the oracle and cache its class count into `self`.
    ///
    /// A class count already set on the descriptor must agree with the
    /// oracle's metadata.
    pub fn open(&mut self) -> Result<Box<dyn Oracle>> {
        if self.batch_size == 0 || self.max_in_flight == 0 {
            return Err(Error::Config(
                "batch size and in-flight cap must be at least 1".into(),
            ));
        }
        let oracle: Box<dyn Oracle> = match self.kind {
            OracleKind::File => Box::new(FileOracle::open(&self.locator)?),
            OracleKind::Http => Box::new(HttpOracle::connect(
                &self.locator,
                self.batch_size,
                self.max_in_flight,
            )?),
            OracleKind::Simulator => {
                let config = ScenarioConfig::load(Path::new(&self.locator))?;
                Box::new(SimulatorOracle::new(Arc::new(Scenario::generate(config)?)))
            }
        };
        let meta = oracle.metadata()?;
        if meta.num_classes < 2 {
            return Err(Error::Config(format!(
                "oracle reports {} classes, need at least 2",
                meta.num_classes
            )));
        }
        match self.num_classes {
            Some(n) if n != meta.num_classes => {
                return Err(Error::Protocol(format!(
                    "descriptor expects {n} classes, oracle reports {}",
                    meta.num_classes
                )))
            }
            _ => self.num_classes = Some(meta.num_classes),
        }
        Ok(oracle)
    }
}
