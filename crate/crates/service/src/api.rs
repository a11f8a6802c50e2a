use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use graphal_core::{ActiveSession, LabelSource};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::store::{CreateRequest, SessionSlot, SessionStore};

type ApiResult<T> = Result<T, ApiError>;
type AppState = Arc<SessionStore>;

pub fn router(store: AppState) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/query", get(get_query))
        .route("/sessions/{id}/labels", post(post_label))
        .route("/sessions/{id}/predictions", get(get_predictions))
        .route("/sessions/{id}/history", get(get_history))
        .route("/sessions/{id}/accuracy", get(get_accuracy))
        .with_state(store)
}

fn slot(store: &SessionStore, id: &str) -> ApiResult<Arc<SessionSlot>> {
    store.get(id).ok_or_else(|| ApiError::unknown_session(id))
}

fn descriptor(slot: &SessionSlot, s: &ActiveSession) -> Value {
    let meta = slot.meta.read();
    json!({
        "session_id": meta.session_id,
        "dataset": meta.dataset,
        "n": s.n(),
        "d": meta.d,
        "classes": s.classes(),
        "acquisition": s.config().acquisition,
        "labeled_count": s.labeled_count(),
        "pool_remaining": s.pool_remaining(),
        "step": s.step(),
        "pending": s.pending().map(|(node, value)| json!({ "node": node, "acquisition_value": value })),
        "created": meta.created,
        "updated": meta.updated,
    })
}

async fn list_sessions(State(store): State<AppState>) -> Json<Value> {
    let sessions: Vec<Value> = store
        .ids()
        .iter()
        .filter_map(|id| store.get(id))
        .map(|slot| descriptor(&slot, &slot.snapshot()))
        .collect();
    Json(json!({ "sessions": sessions }))
}

async fn create_session(
    State(store): State<AppState>,
    body: Result<Json<CreateRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let worker = store.clone();
    let slot = tokio::task::spawn_blocking(move || worker.create(req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let body = descriptor(&slot, &slot.snapshot());
    Ok((StatusCode::CREATED, Json(body)))
}

async fn get_session(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = slot(&store, &id)?;
    let body = descriptor(&slot, &slot.snapshot());
    Ok(Json(body))
}

async fn get_query(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = slot(&store, &id)?;
    let s = slot.snapshot();
    let (node, value) = s.pending().ok_or(graphal_core::Error::PoolExhausted)?;
    let pred = s.predictions();
    let mut body = json!({
        "session_id": id,
        "step": s.step(),
        "node": node,
        "acquisition_value": value,
        "prediction": pred.classes[node],
        "confidence": pred.confidence[node],
    });
    if let Some(display) = &slot.display {
        body["display"] = display[node].clone();
    }
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    node: usize,
    label: usize,
    /// Step the client believes it is labeling; enables double-submit detection.
    step: Option<usize>,
    #[serde(default, rename = "override")]
    allow_override: bool,
}

fn journal_json(s: &ActiveSession, step: usize) -> Value {
    let h = &s.history()[step];
    json!({
        "step": h.step,
        "node": h.node,
        "label": h.label,
        "source": h.source,
        "acquisition_value": h.acquisition_value,
    })
}

async fn post_label(
    State(store): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<LabelRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let slot = slot(&store, &id)?;
    let _writer = slot.writer.lock().await;
    let current = slot.snapshot();

    if let Some(step) = req.step {
        if step < current.step() {
            return Err(ApiError::conflict(
                format!("step {step} was already committed"),
                journal_json(&current, step),
            ));
        }
        if step > current.step() {
            return Err(ApiError::bad_request(format!(
                "step {step} is ahead of the session (next step is {})",
                current.step()
            )));
        }
    }
    if req.node < current.n() && current.labels().is_labeled(req.node) {
        let step = current.journal().iter().position(|e| e.index == req.node).unwrap();
        return Err(ApiError::conflict(
            format!("node {} is already labeled", req.node),
            journal_json(&current, step),
        ));
    }

    let mut next = (*current).clone();
    let (next, record) = tokio::task::spawn_blocking(move || {
        next.commit(req.node, req.label, LabelSource::Human, req.allow_override)
            .map(|r| (next, r))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    slot.publish(next)?;
    let s = slot.snapshot();
    let mut body = descriptor(&slot, &s);
    body["committed"] = json!({
        "step": record.step,
        "node": record.chosen,
        "label": record.label_assigned,
        "acquisition_value": record.acquisition_value.is_finite().then_some(record.acquisition_value),
    });
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
struct PredictionQuery {
    /// Comma-separated node indices; empty or absent means every node.
    nodes: Option<String>,
}

async fn get_predictions(
    State(store): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<PredictionQuery>,
) -> ApiResult<Json<Value>> {
    let slot = slot(&store, &id)?;
    let s = slot.snapshot();
    let pred = s.predictions();
    let nodes: Vec<usize> = match q.nodes.as_deref().map(str::trim) {
        None | Some("") => (0..s.n()).collect(),
        Some(list) => list
            .split(',')
            .map(|t| {
                let i: usize = t
                    .trim()
                    .parse()
                    .map_err(|_| ApiError::bad_request(format!("bad node index {t:?}")))?;
                if i >= s.n() {
                    return Err(ApiError::bad_request(format!("node {i} out of range for {} nodes", s.n())));
                }
                Ok(i)
            })
            .collect::<ApiResult<_>>()?,
    };
    let predictions: Vec<Value> = nodes
        .iter()
        .map(|&i| json!({ "node": i, "prediction": pred.classes[i], "confidence": pred.confidence[i] }))
        .collect();
    Ok(Json(json!({ "session_id": id, "step": s.step(), "predictions": predictions })))
}

async fn get_history(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = slot(&store, &id)?;
    let s = slot.snapshot();
    Ok(Json(json!({ "session_id": id, "history": s.history() })))
}

async fn get_accuracy(State(store): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let slot = slot(&store, &id)?;
    let s = slot.snapshot();
    let accuracy = s.accuracy().ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "no_ground_truth",
            "session was created without ground-truth labels",
        )
    })?;
    let series: Vec<Value> = s
        .accuracy_trace()
        .iter()
        .map(|&(labeled, acc)| json!({ "labeled_count": labeled, "accuracy": acc }))
        .collect();
    Ok(Json(json!({
        "session_id": id,
        "step": s.step(),
        "labeled_count": s.labeled_count(),
        "accuracy": accuracy,
        "series": series,
    })))
}
