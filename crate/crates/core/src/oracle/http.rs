//! Client for the oracle HTTP protocol.
//!
//! ```text
//! GET  /v1/metadata          -> {"num_classes", "name", "input_size": [H, W]}
//! POST /v1/logits            {"images": [b64, ...]}               -> {"logits": [[f64]]}
//! POST /v1/attribute_scores  {"attribute", "values", "images"}    -> {"scores": [[f64]]}
//! ```
//!
//! Images travel as base64-encoded PNG bytes read from the image reference.
//! A server announcing itself as [`SIMULATOR_MODEL_NAME`] gets the UTF-8
//! payload `<tuple_id>/<value>` instead.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use log::{debug, warn};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};

use super::{check_logit_row, check_probability_row, ImageQuery, ModelMetadata, Oracle};
use crate::error::{Error, Result};
use crate::simulator::SIMULATOR_MODEL_NAME;
use crate::space::AttributeSpace;

/// First attempt plus three retries.
pub const MAX_ATTEMPTS: u32 = 4;
pub const BACKOFF_BASE: Duration = Duration::from_millis(100);
const REQUEST_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Serialize)]
struct LogitsRequest<'a> {
    images: &'a [String],
}

#[derive(Deserialize)]
struct LogitsResponse {
    logits: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct ScoresRequest<'a> {
    attribute: &'a str,
    values: &'a [String],
    images: &'a [String],
}

#[derive(Deserialize)]
struct ScoresResponse {
    scores: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

/// How one batch went, after retries.
enum BatchOutcome {
    Rows(Vec<Vec<f64>>),
    /// Error local to the batch's rows; their tuples get skipped.
    Failed(Error),
}

pub struct HttpOracle {
    base: String,
    client: Client,
    metadata: ModelMetadata,
    batch_size: usize,
    max_in_flight: usize,
    simulator_payloads: bool,
}

impl HttpOracle {
    pub fn connect(base_url: &str, batch_size: usize, max_in_flight: usize) -> Result<Self> {
        if batch_size == 0 || max_in_flight == 0 {
            return Err(Error::Config(
                "batch size and in-flight cap must be at least 1".into(),
            ));
        }
        let base = base_url.trim_end_matches('/').to_string();
        let client = Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        let url = format!("{base}/v1/metadata");
        let metadata: ModelMetadata = with_retries(&url, || {
            let resp = client.get(&url).send()?;
            Ok(resp)
        })
        .and_then(|body| {
            serde_json::from_slice(&body)
                .map_err(|e| Error::Config(format!("bad metadata from {url}: {e}")))
        })?;
        debug!("connected to {base}: {metadata:?}");
        Ok(Self {
            simulator_payloads: metadata.name == SIMULATOR_MODEL_NAME,
            base,
            client,
            metadata,
            batch_size,
            max_in_flight,
        })
    }

    fn payload(&self, q: &ImageQuery) -> std::result::Result<String, Error> {
        if self.simulator_payloads {
            return Ok(BASE64.encode(format!("{}/{}", q.tuple_id, q.value)));
        }
        std::fs::read(&q.image)
            .map(|bytes| BASE64.encode(bytes))
            .map_err(|e| Error::MalformedTuple {
                tuple_id: Some(q.tuple_id.clone()),
                value: q.value.clone(),
                reason: format!("cannot read image `{}`: {e}", q.image),
            })
    }

    /// Run `send` over batches of queries with bounded concurrency and
    /// reassemble the rows in query order.
    fn dispatch<F>(&self, queries: &[ImageQuery], send: F) -> Result<Vec<Result<Vec<f64>>>>
    where
        F: Fn(&[String]) -> Result<BatchOutcome> + Sync,
    {
        let batches: Vec<&[ImageQuery]> = queries.chunks(self.batch_size).collect();
        type Rows = Result<Vec<Result<Vec<f64>>>>;
        let results: Mutex<Vec<Option<Rows>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.max_in_flight.min(batches.len());

        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(batch) = batches.get(i) else { break };
                    let out = self.run_batch(batch, &send);
                    results.lock().unwrap()[i] = Some(out);
                });
            }
        });

        let mut rows = Vec::with_capacity(queries.len());
        for r in results.into_inner().unwrap() {
            rows.extend(r.expect("every batch is processed")?);
        }
        Ok(rows)
    }

    fn run_batch<F>(&self, batch: &[ImageQuery], send: &F) -> Result<Vec<Result<Vec<f64>>>>
    where
        F: Fn(&[String]) -> Result<BatchOutcome>,
    {
        let mut rows: Vec<Option<Result<Vec<f64>>>> = (0..batch.len()).map(|_| None).collect();
        let mut images = Vec::with_capacity(batch.len());
        let mut slots = Vec::with_capacity(batch.len());
        for (i, q) in batch.iter().enumerate() {
            match self.payload(q) {
                Ok(p) => {
                    images.push(p);
                    slots.push(i);
                }
                Err(e) => rows[i] = Some(Err(e)),
            }
        }
        if !images.is_empty() {
            match send(&images)? {
                BatchOutcome::Rows(out) => {
                    if out.len() != images.len() {
                        return Err(Error::Protocol(format!(
                            "{} rows returned for {} images",
                            out.len(),
                            images.len()
                        )));
                    }
                    for (slot, row) in slots.iter().zip(out) {
                        rows[*slot] = Some(Ok(row));
                    }
                }
                BatchOutcome::Failed(e) => {
                    warn!("batch of {} images failed: {e}", images.len());
                    for slot in &slots {
                        rows[*slot] = Some(Err(copy_row_error(&e, &batch[*slot])));
                    }
                }
            }
        }
        Ok(rows.into_iter().map(|r| r.expect("slot filled")).collect())
    }

    fn post_json<T: Serialize>(&self, path: &str, body: &T) -> Result<BatchOutcome> {
        let url = format!("{}{path}", self.base);
        let bytes = serde_json::to_vec(body).expect("request bodies serialize");
        let result = with_retries(&url, || {
            self.client
                .post(&url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(bytes.clone())
                .send()
        });
        match result {
            Ok(body) => Ok(BatchOutcome::Rows(parse_rows(path, &body)?)),
            Err(e @ Error::Transport { .. }) => Ok(BatchOutcome::Failed(e)),
            Err(e @ Error::MalformedTuple { .. }) => Ok(BatchOutcome::Failed(e)),
            Err(e) => Err(e),
        }
    }
}

fn parse_rows(path: &str, body: &[u8]) -> Result<Vec<Vec<f64>>> {
    let bad = |e: serde_json::Error| Error::Protocol(format!("bad response from {path}: {e}"));
    if path.ends_with("logits") {
        Ok(serde_json::from_slice::<LogitsResponse>(body)
            .map_err(bad)?
            .logits)
    } else {
        Ok(serde_json::from_slice::<ScoresResponse>(body)
            .map_err(bad)?
            .scores)
    }
}

fn copy_row_error(e: &Error, q: &ImageQuery) -> Error {
    match e {
        Error::Transport { attempts, message } => Error::Transport {
            attempts: *attempts,
            message: message.clone(),
        },
        other => Error::MalformedTuple {
            tuple_id: Some(q.tuple_id.clone()),
            value: q.value.clone(),
            reason: other.to_string(),
        },
    }
}

/// Send with exponential backoff on transport failures and 5xx answers.
///
/// 422 (undecodable image) maps to a row-local error, other 4xx answers to
/// a protocol error; neither is retried.
fn with_retries<F>(url: &str, mut send: F) -> Result<Vec<u8>>
where
    F: FnMut() -> reqwest::Result<reqwest::blocking::Response>,
{
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        if attempt > 0 {
            thread::sleep(BACKOFF_BASE * 2u32.pow(attempt - 1));
        }
        match send() {
            Ok(resp) => {
                let status = resp.status();
                let body = match resp.bytes() {
                    Ok(b) => b.to_vec(),
                    Err(e) => {
                        last = format!("reading body from {url}: {e}");
                        continue;
                    }
                };
                if status.is_success() {
                    return Ok(body);
                }
                let msg = serde_json::from_slice::<ErrorBody>(&body)
                    .map(|b| b.error)
                    .unwrap_or_else(|_| String::from_utf8_lossy(&body).into_owned());
                if status.is_server_error() {
                    last = format!("{url} answered {status}: {msg}");
                    continue;
                }
                if status == StatusCode::UNPROCESSABLE_ENTITY {
                    return Err(Error::MalformedTuple {
                        tuple_id: None,
                        value: String::new(),
                        reason: format!("server rejected image: {msg}"),
                    });
                }
                return Err(Error::Protocol(format!("{url} answered {status}: {msg}")));
            }
            Err(e) => last = format!("{url}: {e}"),
        }
        debug!("attempt {} on {url} failed: {last}", attempt + 1);
    }
    Err(Error::Transport {
        attempts: MAX_ATTEMPTS,
        message: last,
    })
}

impl Oracle for HttpOracle {
    fn metadata(&self) -> Result<ModelMetadata> {
        Ok(self.metadata.clone())
    }

    fn fetch_rows(&self, queries: &[ImageQuery]) -> Result<Vec<Result<Vec<f64>>>> {
        let num_classes = self.metadata.num_classes;
        self.dispatch(queries, |images| {
            let outcome = self.post_json("/v1/logits", &LogitsRequest { images })?;
            if let BatchOutcome::Rows(rows) = &outcome {
                for row in rows {
                    check_logit_row(row, num_classes)?;
                }
            }
            Ok(outcome)
        })
    }

    fn fetch_attribute_scores(
        &self,
        space: &AttributeSpace,
        queries: &[ImageQuery],
    ) -> Result<Vec<Vec<f64>>> {
        if queries.is_empty() {
            return Err(Error::Config(
                "attribute score request list is empty".into(),
            ));
        }
        let rows = self.dispatch(queries, |images| {
            let outcome = self.post_json(
                "/v1/attribute_scores",
                &ScoresRequest {
                    attribute: space.name(),
                    values: space.values(),
                    images,
                },
            )?;
            if let BatchOutcome::Rows(rows) = &outcome {
                for row in rows {
                    check_probability_row(row, space.k())
                        .map_err(|e| Error::Protocol(format!("attribute score row: {e}")))?;
                }
            }
            Ok(outcome)
        })?;
        rows.into_iter().collect()
    }
}
