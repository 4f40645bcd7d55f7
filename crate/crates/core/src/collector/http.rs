//! HTTP/1.1 front end for the [`Store`](super::Store).
//!
//! * `POST /v1/batches` with a [`Batch`] JSON body
//! * `GET /v1/traces?from=YYYYMMDD&to=YYYYMMDD[&probe=ID]` answering JSON lines
//! * `GET /v1/health`
//!
//! All routes except health require `Authorization: Bearer <token>`.

use std::collections::HashSet;
use std::future::Future;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use super::{Ack, Batch, CollectorError, Store};

#[derive(Clone)]
struct AppState {
    store: Arc<Store>,
    tokens: Arc<HashSet<String>>,
}

fn authorized(headers: &HeaderMap, tokens: &HashSet<String>) -> bool {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| tokens.contains(t.trim()))
}

fn error_response(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn collector_error(e: CollectorError) -> Response {
    let status = match &e {
        CollectorError::Checksum(_) | CollectorError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
        CollectorError::Conflict(_) => StatusCode::CONFLICT,
        CollectorError::InvalidRange { .. } => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, e.to_string())
}

async fn health() -> &'static str {
    "ok"
}

async fn submit(State(app): State<AppState>, headers: HeaderMap, body: axum::body::Bytes) -> Response {
    if !authorized(&headers, &app.tokens) {
        return error_response(StatusCode::UNAUTHORIZED, "missing or unknown token");
    }
    let batch: Batch = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("malformed batch: {e}")),
    };
    let store = app.store.clone();
    match tokio::task::spawn_blocking(move || store.submit(&batch)).await {
        Ok(Ok(ack)) => {
            let status = match ack {
                Ack::Accepted => StatusCode::CREATED,
                Ack::Duplicate => StatusCode::OK,
            };
            (status, Json(serde_json::json!({ "status": ack }))).into_response()
        }
        Ok(Err(e)) => collector_error(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    from: String,
    to: String,
    probe: Option<String>,
}

async fn traces(State(app): State<AppState>, headers: HeaderMap, Query(q): Query<TraceQuery>) -> Response {
    if !authorized(&headers, &app.tokens) {
        return error_response(StatusCode::UNAUTHORIZED, "missing or unknown token");
    }
    let store = app.store.clone();
    let body = tokio::task::spawn_blocking(move || -> Result<String, CollectorError> {
        let mut out = String::new();
        for rec in store.query_traces(&q.from, &q.to, q.probe.as_deref())? {
            out.push_str(&rec?.to_json_line());
            out.push('\n');
        }
        Ok(out)
    })
    .await;
    match body {
        Ok(Ok(text)) => ([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response(),
        Ok(Err(e)) => collector_error(e),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(store: Arc<Store>, tokens: impl IntoIterator<Item = String>) -> Router {
    let state = AppState {
        store,
        tokens: Arc::new(tokens.into_iter().collect()),
    };
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/batches", post(submit))
        .route("/v1/traces", get(traces))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    store: Arc<Store>,
    tokens: Vec<String>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(store, tokens))
        .with_graceful_shutdown(shutdown)
        .await
}
