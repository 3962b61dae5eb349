#![allow(dead_code)]

use feedback_core::config::{ExperimentConfig, FeedbackKind, PoolSettings};
use feedback_core::encoding::Target;
use feedback_core::translator::{EventPayload, RawFeedbackEvent};
use feedback_service::FeedbackService;

pub fn config(id: &str) -> ExperimentConfig {
    ExperimentConfig {
        experiment_id: id.into(),
        pool: PoolSettings {
            per_level: 8,
            ..PoolSettings::default()
        },
        ..ExperimentConfig::default()
    }
}

pub fn comparative_only(id: &str) -> ExperimentConfig {
    ExperimentConfig {
        enabled_feedback_types: [FeedbackKind::Comparative].into_iter().collect(),
        ..config(id)
    }
}

pub fn open() -> (tempfile::TempDir, FeedbackService) {
    let dir = tempfile::tempdir().unwrap();
    let svc = FeedbackService::open(dir.path()).unwrap();
    (dir, svc)
}

pub fn event(payload: EventPayload) -> RawFeedbackEvent {
    RawFeedbackEvent {
        session_id: String::new(),
        user_id: String::new(),
        ui_element: "test".into(),
        client_timestamp: 1_700_000_000_000,
        latency_ms: 900,
        confidence: None,
        free_text: None,
        meta: Default::default(),
        payload,
    }
}

pub fn rating(target: Target, value: f64) -> RawFeedbackEvent {
    event(EventPayload::Rating {
        target,
        value,
        scale: None,
    })
}

pub fn ranking(targets: Vec<Target>) -> RawFeedbackEvent {
    event(EventPayload::Ranking {
        targets,
        ranks: None,
    })
}

pub fn ok(events: Vec<RawFeedbackEvent>) -> Vec<Result<RawFeedbackEvent, String>> {
    events.into_iter().map(Ok).collect()
}
