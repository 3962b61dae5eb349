//! HTTP routes over [`FeedbackService`]. Blocking work runs on the tokio
//! blocking pool.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use feedback_core::config::ExperimentConfig;
use feedback_core::translator::RawFeedbackEvent;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::ServiceError;
use crate::service::FeedbackService;
use crate::wire::{CreateSession, TrainRequest};

pub const NDJSON: &str = "application/x-ndjson";

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Validation { .. } | ServiceError::BadRequest(_) => {
                StatusCode::BAD_REQUEST
            }
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::NotFound(_) | ServiceError::SessionNotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::DisabledFeedbackType(_) => StatusCode::FORBIDDEN,
            ServiceError::Exhausted => StatusCode::GONE,
            ServiceError::EmptyDataset | ServiceError::InsufficientData => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            ServiceError::Corrupt(_) | ServiceError::Io(_) | ServiceError::Internal(_) => {
                log::error!("{self}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(self.body())).into_response()
    }
}

type Shared = Arc<FeedbackService>;
type ApiResult<T> = Result<Json<T>, ServiceError>;

async fn blocking<T, F>(svc: &Shared, f: F) -> Result<T, ServiceError>
where
    T: Send + 'static,
    F: FnOnce(&FeedbackService) -> Result<T, ServiceError> + Send + 'static,
{
    let svc = svc.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return serde_json::from_slice(b"{}").map_err(|e| ServiceError::BadRequest(e.to_string()));
    }
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

/// Feedback bodies are NDJSON, or a JSON array when the body starts with `[`.
/// Each element is parsed on its own so one bad event does not sink the rest.
pub fn parse_events(body: &[u8]) -> Result<Vec<Result<RawFeedbackEvent, String>>, ServiceError> {
    let text = std::str::from_utf8(body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let parse = |v: &str| serde_json::from_str::<RawFeedbackEvent>(v).map_err(|e| e.to_string());
    if text.trim_start().starts_with('[') {
        let items: Vec<&serde_json::value::RawValue> =
            serde_json::from_str(text).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        return Ok(items.into_iter().map(|v| parse(v.get())).collect());
    }
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse)
        .collect())
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_experiment(
    State(svc): State<Shared>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let config: ExperimentConfig = parse_json(&body)?;
    let created = blocking(&svc, move |s| s.create_experiment(config)).await?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn get_experiment(
    State(svc): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<impl Serialize> {
    Ok(Json(svc.get_experiment(&id)?))
}

async fn create_session(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let req: CreateSession = parse_json(&body)?;
    let info = blocking(&svc, move |s| s.create_session(&id, req)).await?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn session_info(
    State(svc): State<Shared>,
    Path(sid): Path<String>,
) -> ApiResult<impl Serialize> {
    Ok(Json(svc.session_info(&sid)?))
}

#[derive(Deserialize)]
struct NextQuery {
    k: Option<usize>,
}

async fn next_samples(
    State(svc): State<Shared>,
    Path(sid): Path<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<impl Serialize> {
    let k = q.k.unwrap_or(1);
    Ok(Json(
        blocking(&svc, move |s| s.next_samples(&sid, k)).await?,
    ))
}

async fn submit_feedback(
    State(svc): State<Shared>,
    Path(sid): Path<String>,
    body: Bytes,
) -> ApiResult<impl Serialize> {
    let events = parse_events(&body)?;
    Ok(Json(
        blocking(&svc, move |s| s.submit_feedback(&sid, events)).await?,
    ))
}

async fn train(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl Serialize> {
    let req: TrainRequest = parse_json(&body)?;
    Ok(Json(
        blocking(&svc, move |s| s.run_training(&id, req)).await?,
    ))
}

async fn snapshot(
    State(svc): State<Shared>,
    Path((id, snap)): Path<(String, String)>,
) -> Result<Response, ServiceError> {
    let bytes = blocking(&svc, move |s| s.snapshot_checkpoint(&id, &snap)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn metrics(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    Ok(Json(blocking(&svc, move |s| s.metrics(&id)).await?))
}

async fn quality(State(svc): State<Shared>, Path(sid): Path<String>) -> ApiResult<impl Serialize> {
    Ok(Json(
        blocking(&svc, move |s| s.quality_estimate(&sid)).await?,
    ))
}

async fn export_log(
    State(svc): State<Shared>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let bytes = blocking(&svc, move |s| s.export_log(&id)).await?;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, NDJSON.parse().expect("static header"));
    Ok((headers, bytes).into_response())
}

async fn list_episodes(
    State(svc): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<impl Serialize> {
    Ok(Json(blocking(&svc, move |s| s.list_episodes(&id)).await?))
}

async fn episode(
    State(svc): State<Shared>,
    Path((id, episode)): Path<(String, String)>,
) -> ApiResult<impl Serialize> {
    Ok(Json(
        blocking(&svc, move |s| s.episode_render(&id, &episode)).await?,
    ))
}

/// API routes plus static hosting of `ui_dir` for everything else.
pub fn router(svc: Arc<FeedbackService>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/experiments", post(create_experiment))
        .route("/api/experiments/{id}", get(get_experiment))
        .route("/api/experiments/{id}/sessions", post(create_session))
        .route("/api/experiments/{id}/train", post(train))
        .route("/api/experiments/{id}/snapshots/{snapshot}", get(snapshot))
        .route("/api/experiments/{id}/metrics", get(metrics))
        .route("/api/experiments/{id}/log", get(export_log))
        .route("/api/experiments/{id}/episodes", get(list_episodes))
        .route("/api/experiments/{id}/episodes/{episode}", get(episode))
        .route("/api/sessions/{sid}", get(session_info))
        .route("/api/sessions/{sid}/next", post(next_samples))
        .route("/api/sessions/{sid}/feedback", post(submit_feedback))
        .route("/api/sessions/{sid}/quality", get(quality))
        .with_state(svc);
    match ui_dir {
        Some(dir) => {
            api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true))
        }
        None => api,
    }
}
