use std::net::SocketAddr;
use std::sync::Arc;

use feedback_analysis::simulate::*;
use feedback_analysis::CliError;
use feedback_core::annotator::AnnotatorProfile;
use feedback_core::config::{ExperimentConfig, FeedbackKind, PoolSettings};
use feedback_core::encoding::parse_feedback;
use feedback_service::wire::TrainRequest;
use feedback_service::{http, FeedbackService};

/// Serves the HTTP API on an ephemeral port from a background runtime.
fn serve(svc: Arc<FeedbackService>) -> SocketAddr {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, http::router(svc, None)).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

fn config() -> ExperimentConfig {
    ExperimentConfig {
        experiment_id: "remote".into(),
        pool: PoolSettings {
            per_level: 6,
            ..PoolSettings::default()
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn simulation_over_http_matches_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(FeedbackService::open(dir.path()).unwrap());
    let addr = serve(svc.clone());
    let remote = Remote::new(&format!("http://{addr}/")).unwrap();
    remote.create_experiment(&config()).unwrap();

    let plan = SimulationPlan {
        experiment_id: "remote".into(),
        annotators: (0..4).map(|u| AnnotatorProfile::uniform(&format!("r{u}"), 2.0, u)).collect(),
        events_per_session: 40,
        batch: Some(3),
        kinds: None,
        train: Some(TrainRequest {
            seed: Some(3),
            mint_episodes: 2,
        }),
    };
    let outcome = run_simulation(&remote, &plan).unwrap();
    assert_eq!(outcome.submitted(), 160);
    assert_eq!(outcome.accepted(), 160);
    assert!(outcome.sessions.iter().all(|s| s.rejected == 0));
    let training = outcome.training.unwrap();
    assert_eq!(training.metrics.minted_episodes, 2);

    let log = remote.export_log("remote").unwrap();
    assert_eq!(log, svc.export_log("remote").unwrap());
    let kinds: std::collections::BTreeSet<_> = std::str::from_utf8(&log)
        .unwrap()
        .lines()
        .map(|l| parse_feedback(l).unwrap())
        .filter_map(|r| feedback_core::analysis::record_kind(&r))
        .collect();
    assert_eq!(kinds, FeedbackKind::ALL.into_iter().collect());

    assert_eq!(remote.metrics("remote").unwrap(), svc.metrics("remote").unwrap());
    for s in &outcome.sessions {
        assert_eq!(remote.session(&s.session_id).unwrap().feedback_count, s.accepted.len() as u64);
    }
}

#[test]
fn remote_errors_carry_the_error_body() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(FeedbackService::open(dir.path()).unwrap());
    let remote = Remote::new(&format!("http://{}", serve(svc))).unwrap();
    match remote.experiment("missing") {
        Err(CliError::Remote { status: 404, body }) => assert_eq!(body.error, "not_found"),
        other => panic!("{other:?}"),
    }
    match remote.quality("no-such-session") {
        Err(CliError::Remote { status, .. }) => assert!((400..500).contains(&status)),
        other => panic!("{other:?}"),
    }
}
