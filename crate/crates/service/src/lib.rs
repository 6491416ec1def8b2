//! HTTP API over the pipeline's published snapshots.
//!
//! Every response body is a JSON object carrying `"v": 1`. Reads clone the
//! latest snapshot and never wait on window processing; labels are queued
//! and applied by the pipeline at the next window boundary.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dante_core::concepts::{ConceptId, Severity};
use dante_core::pipeline::{ConceptView, LabelRequest, Shared, Submit};
use dante_core::port2vec::EmbeddingTable;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_VERSION: u64 = 1;
const MAX_TIMELINE_WINDOWS: u64 = 10_000;
const NEAREST_PER_CONCEPT: usize = 8;

#[derive(Clone)]
pub struct ApiState {
    pub shared: Arc<Shared>,
    /// Enables nearest-port context; optional so the API can run over a
    /// state directory alone.
    pub table: Option<Arc<EmbeddingTable>>,
}

pub fn router(state: ApiState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/status", get(status))
        .route("/api/windows/latest", get(latest_window))
        .route("/api/windows/{index}", get(window))
        .route("/api/concepts", get(concepts))
        .route("/api/concepts/{id}", get(concept))
        .route("/api/concepts/{id}/label", post(label))
        .route("/api/alerts", get(alerts))
        .route("/api/timeline", get(timeline))
        .route("/api/ports/{port}/nearest", get(nearest))
        .fallback(|| async { error(StatusCode::NOT_FOUND, "no such endpoint") })
        .with_state(state);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

fn versioned(body: impl Serialize) -> Value {
    let mut v = serde_json::to_value(body).unwrap_or(Value::Null);
    match v.as_object_mut() {
        Some(map) => {
            map.insert("v".into(), json!(API_VERSION));
            v
        }
        None => json!({ "v": API_VERSION, "data": v }),
    }
}

fn ok(body: impl Serialize) -> Response {
    Json(versioned(body)).into_response()
}

fn error(code: StatusCode, msg: impl Into<String>) -> Response {
    (code, Json(json!({ "v": API_VERSION, "error": msg.into() }))).into_response()
}

async fn status(State(st): State<ApiState>) -> Response {
    let snap = st.shared.snapshot();
    ok(json!({
        "running": snap.running,
        "last_window": snap.latest().map(|r| r.window),
        "windows": snap.reports.len(),
        "concepts": snap.concepts.len(),
        "alerts": snap.alerts.len(),
        "pending_labels": st.shared.pending_labels(),
    }))
}

async fn latest_window(State(st): State<ApiState>) -> Response {
    match st.shared.snapshot().latest() {
        Some(r) => ok(r),
        None => error(StatusCode::NOT_FOUND, "no window has been processed yet"),
    }
}

async fn window(State(st): State<ApiState>, UrlPath(index): UrlPath<String>) -> Response {
    let Ok(index) = index.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, format!("window index `{index}` is not a non-negative integer"));
    };
    match st.shared.snapshot().reports.get(&index) {
        Some(r) => ok(r),
        None => error(StatusCode::NOT_FOUND, format!("window {index} not available")),
    }
}

#[derive(Debug, Deserialize)]
struct ConceptQuery {
    novel_since: Option<u64>,
}

async fn concepts(State(st): State<ApiState>, q: Result<Query<ConceptQuery>, axum::extract::rejection::QueryRejection>) -> Response {
    let Ok(Query(q)) = q else {
        return error(StatusCode::BAD_REQUEST, "novel_since must be a window index");
    };
    let snap = st.shared.snapshot();
    let list: Vec<&ConceptView> = match q.novel_since {
        Some(w) => snap.novel_since(w),
        None => snap.concepts.iter().collect(),
    };
    let latest = snap.latest();
    let items: Vec<Value> = list
        .into_iter()
        .map(|c| {
            let mut v = serde_json::to_value(c).unwrap_or(Value::Null);
            let size = latest.and_then(|r| r.concept_sizes().get(&c.id).copied());
            v["latest_size"] = json!(size);
            v
        })
        .collect();
    ok(json!({ "concepts": items }))
}

#[derive(Debug, Serialize)]
struct Neighbour {
    port: u16,
    cosine: f64,
}

async fn concept(State(st): State<ApiState>, UrlPath(id): UrlPath<String>) -> Response {
    let snap = st.shared.snapshot();
    let id = ConceptId::from(id.as_str());
    let Some(c) = snap.concept(&id) else {
        return error(StatusCode::NOT_FOUND, format!("concept {id} not found"));
    };
    let sizes: Vec<Value> = snap
        .reports
        .values()
        .filter_map(|r| r.concept_sizes().get(&id).map(|s| json!({ "window": r.window, "size": s })))
        .collect();
    let mut body = serde_json::to_value(c).unwrap_or(Value::Null);
    body["sizes"] = json!(sizes);
    if let Some(table) = &st.table {
        let ports: BTreeSet<u16> = c.exemplars.iter().flatten().copied().collect();
        let context: serde_json::Map<String, Value> = ports
            .into_iter()
            .take(NEAREST_PER_CONCEPT)
            .filter_map(|p| {
                let near = table.nearest_ports(p, 5).ok()?;
                let near: Vec<Neighbour> = near.into_iter().map(|(port, cosine)| Neighbour { port, cosine }).collect();
                Some((p.to_string(), json!(near)))
            })
            .collect();
        body["nearest_ports"] = Value::Object(context);
    }
    ok(body)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBody {
    pub severity: Severity,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub author: Option<String>,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

async fn label(
    State(st): State<ApiState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> Response {
    let body = match body {
        Ok(Json(b)) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let key = body.idempotency_key.or_else(|| {
        headers
            .get("idempotency-key")
            .and_then(|h| h.to_str().ok())
            .map(str::to_string)
    });
    let concept = ConceptId::from(id.as_str());
    let req = LabelRequest {
        concept: concept.clone(),
        severity: body.severity,
        note: body.note,
        author: body.author.unwrap_or_else(|| "api".into()),
        at_ms: chrono::Utc::now().timestamp_millis(),
        idempotency_key: key,
    };
    match st.shared.submit(req) {
        Submit::Queued => (
            StatusCode::ACCEPTED,
            Json(versioned(json!({ "status": "queued", "concept": concept, "severity": body.severity }))),
        )
            .into_response(),
        Submit::Duplicate => ok(json!({ "status": "duplicate", "concept": concept })),
        Submit::UnknownConcept => error(StatusCode::NOT_FOUND, format!("concept {concept} not found")),
    }
}

#[derive(Debug, Deserialize)]
struct SinceQuery {
    since: Option<u64>,
}

async fn alerts(State(st): State<ApiState>, q: Result<Query<SinceQuery>, axum::extract::rejection::QueryRejection>) -> Response {
    let Ok(Query(q)) = q else {
        return error(StatusCode::BAD_REQUEST, "since must be a window index");
    };
    let snap = st.shared.snapshot();
    ok(json!({ "alerts": snap.alerts_since(q.since.unwrap_or(0)) }))
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    from: Option<u64>,
    to: Option<u64>,
}

async fn timeline(State(st): State<ApiState>, q: Result<Query<RangeQuery>, axum::extract::rejection::QueryRejection>) -> Response {
    let Ok(Query(q)) = q else {
        return error(StatusCode::BAD_REQUEST, "from and to must be window indices");
    };
    let snap = st.shared.snapshot();
    let first = snap.reports.keys().next().copied().unwrap_or(0);
    let last = snap.reports.keys().next_back().copied().unwrap_or(0);
    let (from, to) = (q.from.unwrap_or(first), q.to.unwrap_or(last));
    if to >= from && to - from >= MAX_TIMELINE_WINDOWS {
        return error(StatusCode::BAD_REQUEST, format!("range longer than {MAX_TIMELINE_WINDOWS} windows"));
    }
    if snap.reports.is_empty() && q.from.is_none() && q.to.is_none() {
        return ok(json!({ "windows": [], "series": {}, "noise": [] }));
    }
    ok(snap.timeline(from, to))
}

#[derive(Debug, Deserialize)]
struct NearestQuery {
    k: Option<usize>,
}

async fn nearest(State(st): State<ApiState>, UrlPath(port): UrlPath<String>, Query(q): Query<NearestQuery>) -> Response {
    let Some(table) = &st.table else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no embedding table loaded");
    };
    let Ok(port) = port.parse::<u16>() else {
        return error(StatusCode::BAD_REQUEST, format!("`{port}` is not a port number"));
    };
    match table.nearest_ports(port, q.k.unwrap_or(10).min(1000)) {
        Ok(near) => ok(json!({
            "port": port,
            "nearest": near.into_iter().map(|(port, cosine)| Neighbour { port, cosine }).collect::<Vec<_>>(),
        })),
        Err(e) => error(StatusCode::NOT_FOUND, e.to_string()),
    }
}
