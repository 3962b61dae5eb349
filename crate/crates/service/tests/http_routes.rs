mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use common::*;
use feedback_core::encoding::{parse_feedback, Target};
use feedback_service::wire::*;
use feedback_service::{http, ErrorBody, FeedbackService};
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use tower::ServiceExt;

struct App {
    _dir: tempfile::TempDir,
    router: Router,
}

fn app() -> App {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(ui.join("assets")).unwrap();
    std::fs::write(ui.join("index.html"), "<!doctype html><title>ui</title>").unwrap();
    std::fs::write(ui.join("assets/app.js"), "console.log(1);").unwrap();
    let svc = FeedbackService::open(dir.path().join("store")).unwrap();
    App {
        router: http::router(Arc::new(svc), Some(ui)),
        _dir: dir,
    }
}

async fn call(app: &App, method: &str, uri: &str, body: impl Into<Body>) -> (StatusCode, Vec<u8>, String) {
    let req = Request::builder().method(method).uri(uri).body(body.into()).unwrap();
    let resp = app.router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn json<T: DeserializeOwned>(app: &App, method: &str, uri: &str, body: String, want: StatusCode) -> T {
    let (status, bytes, _) = call(app, method, uri, body).await;
    assert_eq!(status, want, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn setup(app: &App, cfg: feedback_core::config::ExperimentConfig) -> SessionInfo {
    let id = cfg.experiment_id.clone();
    let _: CreatedExperiment = json(
        app,
        "POST",
        "/api/experiments",
        serde_json::to_string(&cfg).unwrap(),
        StatusCode::CREATED,
    )
    .await;
    json(
        app,
        "POST",
        &format!("/api/experiments/{id}/sessions"),
        r#"{"user_id":"alice"}"#.into(),
        StatusCode::CREATED,
    )
    .await
}

#[tokio::test]
async fn experiment_lifecycle_status_codes() {
    let app = app();
    let (status, body, _) = call(&app, "GET", "/api/health", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, br#"{"status":"ok"}"#);

    let s = setup(&app, config("e")).await;
    assert_eq!(s.user_id, "alice");
    let err: ErrorBody = json(
        &app,
        "POST",
        "/api/experiments",
        serde_json::to_string(&config("e")).unwrap(),
        StatusCode::CONFLICT,
    )
    .await;
    assert_eq!(err.error, "conflict");

    let mut bad = config("bad");
    bad.comparison_slots = 1;
    let err: ErrorBody = json(
        &app,
        "POST",
        "/api/experiments",
        serde_json::to_string(&bad).unwrap(),
        StatusCode::BAD_REQUEST,
    )
    .await;
    assert_eq!(err.error, "validation_error");
    assert_eq!(err.field.as_deref(), Some("comparison_slots"));

    let (status, _, _) = call(&app, "POST", "/api/experiments", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = call(&app, "GET", "/api/experiments/missing", Body::empty()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = call(&app, "POST", "/api/sessions/missing/next?k=1", Body::empty()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let view: ExperimentView = json(&app, "GET", "/api/experiments/e", String::new(), StatusCode::OK).await;
    assert_eq!(view.config.experiment_id, "e");

    let err: ErrorBody = json(
        &app,
        "POST",
        "/api/experiments/e/train",
        String::new(),
        StatusCode::UNPROCESSABLE_ENTITY,
    )
    .await;
    assert_eq!(err.error, "empty_dataset");
    let err: ErrorBody = json(
        &app,
        "GET",
        &format!("/api/sessions/{}/quality", s.session_id),
        String::new(),
        StatusCode::UNPROCESSABLE_ENTITY,
    )
    .await;
    assert_eq!(err.error, "insufficient_data");
}

#[tokio::test]
async fn sample_submit_train_export() {
    let app = app();
    let s = setup(&app, config("e")).await;
    let sid = &s.session_id;
    let batch: SampleBatch = json(
        &app,
        "POST",
        &format!("/api/sessions/{sid}/next?k=2"),
        String::new(),
        StatusCode::OK,
    )
    .await;
    assert_eq!(batch.episodes.len(), 2);
    let ep = &batch.episodes[0];
    assert_eq!(ep.actions.len(), ep.n_steps);

    // Ten ratings as NDJSON, one outside the scale.
    let lines: Vec<String> = (0..10)
        .map(|i| {
            let target = Target::episode(batch.episodes[i % 2].episode_id.clone());
            let value = if i == 6 { 0.0 } else { 1.0 + (i % 5) as f64 };
            serde_json::to_string(&rating(target, value)).unwrap()
        })
        .collect();
    let resp: SubmitResponse = json(
        &app,
        "POST",
        &format!("/api/sessions/{sid}/feedback"),
        lines.join("\n"),
        StatusCode::OK,
    )
    .await;
    assert_eq!(resp.accepted_ids().len(), 9);
    assert!(matches!(resp.results[6], EventResult::Rejected { index: 6, .. }));

    // JSON array body with a malformed element.
    let pair = ranking(vec![
        Target::episode(batch.episodes[0].episode_id.clone()),
        Target::episode(batch.episodes[1].episode_id.clone()),
    ]);
    let body = format!("[{}, {{\"event_kind\":\"rating\"}}]", serde_json::to_string(&pair).unwrap());
    let resp: SubmitResponse = json(
        &app,
        "POST",
        &format!("/api/sessions/{sid}/feedback"),
        body,
        StatusCode::OK,
    )
    .await;
    assert_eq!(resp.accepted_ids(), vec![9]);
    assert_eq!(resp.rejected(), 1);

    let info: SessionInfo = json(&app, "GET", &format!("/api/sessions/{sid}"), String::new(), StatusCode::OK).await;
    assert_eq!(info.feedback_count, 10);

    let trained: TrainingResult = json(
        &app,
        "POST",
        "/api/experiments/e/train",
        r#"{"seed": 5}"#.into(),
        StatusCode::OK,
    )
    .await;
    assert_eq!(trained.metrics.log_records, 10);
    let (status, ckpt, ctype) = call(
        &app,
        "GET",
        &format!("/api/experiments/e/snapshots/{}", trained.snapshot_id),
        Body::empty(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "application/octet-stream");
    assert!(!ckpt.is_empty());

    let metrics: ExperimentMetrics = json(&app, "GET", "/api/experiments/e/metrics", String::new(), StatusCode::OK).await;
    assert_eq!(metrics.log_records, 10);
    assert_eq!(metrics.sessions, 1);
    assert_eq!(metrics.latest_snapshot.as_ref(), Some(&trained));

    let (status, log, ctype) = call(&app, "GET", "/api/experiments/e/log", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, http::NDJSON);
    let text = String::from_utf8(log.clone()).unwrap();
    assert_eq!(text.lines().count(), 10);
    for line in text.lines() {
        parse_feedback(line).unwrap();
    }
    let (_, again, _) = call(&app, "GET", "/api/experiments/e/log", Body::empty()).await;
    assert_eq!(log, again);

    let list: Vec<EpisodeSummary> = json(&app, "GET", "/api/experiments/e/episodes", String::new(), StatusCode::OK).await;
    assert_eq!(list.len(), 56);
    let id = list[3].episode_id.to_string();
    let one: RenderPayload = json(
        &app,
        "GET",
        &format!("/api/experiments/e/episodes/{id}"),
        String::new(),
        StatusCode::OK,
    )
    .await;
    assert_eq!(one.episode_id, list[3].episode_id);
    assert!(one.hints.iter().all(|&t| (t as usize) < one.n_steps));
    let (status, _, _) = call(&app, "GET", "/api/experiments/e/episodes/not-an-id", Body::empty()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn disabled_type_is_forbidden() {
    let app = app();
    let s = setup(&app, comparative_only("c")).await;
    let list: Vec<EpisodeSummary> = json(&app, "GET", "/api/experiments/c/episodes", String::new(), StatusCode::OK).await;
    let body = serde_json::to_string(&rating(Target::episode(list[0].episode_id.clone()), 3.0)).unwrap();
    let err: ErrorBody = json(
        &app,
        "POST",
        &format!("/api/sessions/{}/feedback", s.session_id),
        body,
        StatusCode::FORBIDDEN,
    )
    .await;
    assert_eq!(err.error, "disabled_feedback_type");
    let (_, log, _) = call(&app, "GET", "/api/experiments/c/log", Body::empty()).await;
    assert!(log.is_empty());
}

#[tokio::test]
async fn exhausted_sampler_is_gone() {
    let app = app();
    let mut cfg = config("p");
    cfg.pool.per_level = 1;
    cfg.sampler = feedback_core::sampler::SamplerMode::Progressive { window: None };
    let s = setup(&app, cfg).await;
    let uri = format!("/api/sessions/{}/next?k=7", s.session_id);
    let first: SampleBatch = json(&app, "POST", &uri, String::new(), StatusCode::OK).await;
    assert_eq!(first.episodes.len(), 7);
    let err: ErrorBody = json(&app, "POST", &uri, String::new(), StatusCode::GONE).await;
    assert_eq!(err.error, "exhausted");
}

#[tokio::test]
async fn static_ui_is_served() {
    let app = app();
    let (status, body, ctype) = call(&app, "GET", "/", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("text/html"));
    assert!(String::from_utf8(body).unwrap().contains("<title>ui</title>"));
    let (status, body, ctype) = call(&app, "GET", "/assets/app.js", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.contains("javascript"), "{ctype}");
    assert_eq!(body, b"console.log(1);");
    let (status, _, _) = call(&app, "GET", "/assets/missing.js", Body::empty()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
