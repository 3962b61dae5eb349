use std::path::Path;
use std::sync::Arc;

use feedback_core::analysis::{consistency_table, counts_by_kind};
use feedback_core::annotator::AnnotatorProfile;
use feedback_core::config::{ExperimentConfig, FeedbackKind, PoolSettings};
use feedback_core::encoding::parse_feedback;
use feedback_service::FeedbackService;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Check;
use crate::inputs::{parse_log, ExperimentInputs, InputPaths};
use crate::simulate::{run_simulation, Backend, Embedded, SimulationPlan};

const C9_SESSIONS: usize = 8;
const C9_PER_SESSION: usize = 1250;
const C9_PREFIXES: usize = 200;

fn c9_config() -> ExperimentConfig {
    ExperimentConfig {
        experiment_id: "c9".into(),
        enabled_feedback_types: [FeedbackKind::Evaluative, FeedbackKind::Comparative].into(),
        pool: PoolSettings {
            per_level: 8,
            ..PoolSettings::default()
        },
        ..ExperimentConfig::default()
    }
}

/// Lines that fail to parse, or whose ids are not `0, 1, 2, ...`.
fn bad_lines(log: &[u8]) -> usize {
    let Ok(text) = std::str::from_utf8(log) else {
        return usize::MAX;
    };
    text.lines()
        .enumerate()
        .filter(|(i, l)| parse_feedback(l).map(|r| r.feedback_id != *i as u64).unwrap_or(true))
        .count()
}

/// Random byte prefixes whose recovered records are not exactly the lines
/// completed before the cut.
fn bad_prefixes(log: &[u8], rng: &mut ChaCha8Rng) -> usize {
    (0..C9_PREFIXES)
        .filter(|_| {
            let cut = rng.random_range(0..=log.len());
            let complete = log[..cut].iter().filter(|&&b| b == b'\n').count();
            !matches!(parse_log(Path::new("prefix"), &log[..cut]), Ok((_, r)) if r.len() == complete)
        })
        .count()
}

pub fn log_integrity() -> Result<Check, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let svc = Arc::new(FeedbackService::open(dir.path()).map_err(|e| e.to_string())?);
    let backend = Embedded(svc.clone());
    let config = c9_config();
    backend.create_experiment(&config).map_err(|e| e.to_string())?;
    let plan = SimulationPlan {
        experiment_id: config.experiment_id.clone(),
        annotators: (0..C9_SESSIONS)
            .map(|u| AnnotatorProfile::uniform(&format!("user{u}"), 2.0, u as u64))
            .collect(),
        events_per_session: C9_PER_SESSION,
        batch: None,
        kinds: None,
        train: None,
    };
    let outcome = run_simulation(&backend, &plan).map_err(|e| e.to_string())?;
    let rejected: usize = outcome.sessions.iter().map(|s| s.rejected).sum();

    let log = svc.export_log(&config.experiment_id).map_err(|e| e.to_string())?;
    let again = svc.export_log(&config.experiment_id).map_err(|e| e.to_string())?;
    let on_disk = std::fs::read(dir.path().join("experiments").join(&config.experiment_id).join("feedback.log"))
        .map_err(|e| e.to_string())?;
    let stable = log == again && log == on_disk;
    let lines = log.iter().filter(|&&b| b == b'\n').count();
    let bad = bad_lines(&log);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let torn = bad_prefixes(&log, &mut rng);

    let mut counts_ok = true;
    for s in &outcome.sessions {
        let info = svc.session_info(&s.session_id).map_err(|e| e.to_string())?;
        counts_ok &= info.feedback_count as usize == s.accepted.len();
    }
    // The offline loader agrees with the live service.
    let inputs = ExperimentInputs::load(&InputPaths::new(dir.path().join("experiments").join(&config.experiment_id)))
        .map_err(|e| e.to_string())?;
    let metrics = svc.metrics(&config.experiment_id).map_err(|e| e.to_string())?;
    let offline_ok = counts_by_kind(&inputs.records) == metrics.counts_by_kind
        && consistency_table(&inputs.records) == metrics.consistency
        && inputs.records.len() as u64 == metrics.log_records;

    let submitted = outcome.submitted();
    let accepted = outcome.accepted();
    let passed = submitted == C9_SESSIONS * C9_PER_SESSION
        && rejected == 0
        && lines == accepted
        && bad == 0
        && torn == 0
        && stable
        && counts_ok;
    Ok(Check::new(
        passed,
        format!(
            "{C9_SESSIONS} sessions, {submitted} submitted, {accepted} accepted, {rejected} rejected; {lines} log lines, {bad} unparsable or out of order, {torn}/{C9_PREFIXES} torn prefixes misread, export stable {stable}"
        ),
    )
    .note(format!(
        "per-session counts match {counts_ok}, offline tables match service metrics {offline_ok}"
    )))
}
