//! The simulator served over the oracle HTTP protocol.
//!
//! `/v1/logits` and `/v1/attribute_scores` read each image as the UTF-8
//! payload `<tuple_id>/<value>` rather than PNG bytes.

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::oneshot;

use super::{Scenario, SIMULATOR_MODEL_NAME};
use crate::error::{Error, Result};

/// A running simulator server. Dropping it shuts the server down.
pub struct SimServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl SimServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block until the server stops on its own.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Bind `bind_address` (e.g. `127.0.0.1:0`) and serve the scenario on a
/// background thread.
pub fn serve(scenario: Arc<Scenario>, bind_address: &str) -> Result<SimServer> {
    let listener = TcpListener::bind(bind_address)
        .map_err(|e| Error::Config(format!("cannot bind {bind_address}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Config(format!("cannot read bound address: {e}")))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| Error::Config(format!("cannot configure listener: {e}")))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_io()
        .build()
        .map_err(|e| Error::Config(format!("cannot start server runtime: {e}")))?;

    let (tx, rx) = oneshot::channel::<()>();
    let app = router(scenario);
    let thread = std::thread::Builder::new()
        .name("caia-sim-server".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)
                    .expect("listener registers with the runtime");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        })
        .map_err(|e| Error::Config(format!("cannot spawn server thread: {e}")))?;

    Ok(SimServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

fn router(scenario: Arc<Scenario>) -> Router {
    Router::new()
        .route("/v1/metadata", get(metadata))
        .route("/v1/logits", post(logits))
        .route("/v1/attribute_scores", post(attribute_scores))
        .with_state(scenario)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.to_string())
}

fn unprocessable(msg: impl ToString) -> ApiError {
    ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.to_string())
}

#[derive(Deserialize)]
struct LogitsBody {
    images: Vec<String>,
}

#[derive(Deserialize)]
struct ScoresBody {
    attribute: String,
    values: Vec<String>,
    images: Vec<String>,
}

async fn metadata(State(s): State<Arc<Scenario>>) -> Json<serde_json::Value> {
    Json(json!({
        "num_classes": s.num_classes(),
        "name": SIMULATOR_MODEL_NAME,
        "input_size": [0, 0],
    }))
}

/// Split a base64 payload into `(tuple_id, value)`.
fn decode_payload(s: &Scenario, image: &str) -> std::result::Result<(String, String), ApiError> {
    let bytes = BASE64
        .decode(image)
        .map_err(|e| unprocessable(format!("image is not base64: {e}")))?;
    let text =
        String::from_utf8(bytes).map_err(|_| unprocessable("simulator payload is not UTF-8"))?;
    let (tuple_id, value) = text
        .rsplit_once('/')
        .ok_or_else(|| unprocessable(format!("payload `{text}` is not <tuple_id>/<value>")))?;
    if tuple_id.is_empty() || s.space().index_of(value).is_none() {
        return Err(unprocessable(format!(
            "payload `{text}` names no known image"
        )));
    }
    Ok((tuple_id.to_string(), value.to_string()))
}

async fn logits(
    State(s): State<Arc<Scenario>>,
    body: Bytes,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let req: LogitsBody = serde_json::from_slice(&body).map_err(bad_request)?;
    let rows = req
        .images
        .iter()
        .map(|img| {
            let (t, v) = decode_payload(&s, img)?;
            s.simulate_logits(&t, &v).map_err(unprocessable)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Json(json!({ "logits": rows })))
}

async fn attribute_scores(
    State(s): State<Arc<Scenario>>,
    body: Bytes,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let req: ScoresBody = serde_json::from_slice(&body).map_err(bad_request)?;
    if req.attribute != s.space().name() || req.values != s.space().values() {
        return Err(bad_request(format!(
            "simulator scores attribute `{}` with values {:?}",
            s.space().name(),
            s.space().values()
        )));
    }
    let rows = req
        .images
        .iter()
        .map(|img| {
            let (t, v) = decode_payload(&s, img)?;
            s.attribute_scores(&t, &v).map_err(unprocessable)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Json(json!({ "scores": rows })))
}
