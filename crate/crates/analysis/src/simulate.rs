//! Drives simulated annotators through the service end to end, either
//! in-process or against a running server.

use std::collections::BTreeSet;
use std::sync::Arc;

use feedback_core::analysis::QualityEstimate;
use feedback_core::annotator::{AnnotatorProfile, SimulatedAnnotator};
use feedback_core::config::{ExperimentConfig, FeedbackKind};
use feedback_core::encoding::Target;
use feedback_core::gridworld::{episode_from_actions, value_iteration, EpisodeRecord, GridSpec, ValueTable};
use feedback_core::translator::RawFeedbackEvent;
use feedback_service::wire::*;
use feedback_service::{ErrorBody, FeedbackService};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;
use crate::inputs::PLAN_TOL;

/// The service operations a simulation needs.
pub trait Backend: Sync {
    fn create_experiment(&self, config: &ExperimentConfig) -> Result<CreatedExperiment, CliError>;
    fn experiment(&self, id: &str) -> Result<ExperimentView, CliError>;
    fn create_session(&self, id: &str, user_id: &str) -> Result<SessionInfo, CliError>;
    fn session(&self, session_id: &str) -> Result<SessionInfo, CliError>;
    fn next_samples(&self, session_id: &str, k: usize) -> Result<SampleBatch, CliError>;
    fn submit(&self, session_id: &str, events: &[RawFeedbackEvent]) -> Result<SubmitResponse, CliError>;
    fn train(&self, id: &str, req: &TrainRequest) -> Result<TrainingResult, CliError>;
    fn quality(&self, session_id: &str) -> Result<QualityEstimate, CliError>;
    fn metrics(&self, id: &str) -> Result<ExperimentMetrics, CliError>;
    fn export_log(&self, id: &str) -> Result<Vec<u8>, CliError>;
}

/// The service in this process.
pub struct Embedded(pub Arc<FeedbackService>);

impl Backend for Embedded {
    fn create_experiment(&self, config: &ExperimentConfig) -> Result<CreatedExperiment, CliError> {
        Ok(self.0.create_experiment(config.clone())?)
    }

    fn experiment(&self, id: &str) -> Result<ExperimentView, CliError> {
        Ok(self.0.get_experiment(id)?)
    }

    fn create_session(&self, id: &str, user_id: &str) -> Result<SessionInfo, CliError> {
        Ok(self.0.create_session(
            id,
            CreateSession {
                user_id: Some(user_id.into()),
            },
        )?)
    }

    fn session(&self, session_id: &str) -> Result<SessionInfo, CliError> {
        Ok(self.0.session_info(session_id)?)
    }

    fn next_samples(&self, session_id: &str, k: usize) -> Result<SampleBatch, CliError> {
        Ok(self.0.next_samples(session_id, k)?)
    }

    fn submit(&self, session_id: &str, events: &[RawFeedbackEvent]) -> Result<SubmitResponse, CliError> {
        Ok(self
            .0
            .submit_feedback(session_id, events.iter().cloned().map(Ok).collect())?)
    }

    fn train(&self, id: &str, req: &TrainRequest) -> Result<TrainingResult, CliError> {
        Ok(self.0.run_training(id, req.clone())?)
    }

    fn quality(&self, session_id: &str) -> Result<QualityEstimate, CliError> {
        Ok(self.0.quality_estimate(session_id)?)
    }

    fn metrics(&self, id: &str) -> Result<ExperimentMetrics, CliError> {
        Ok(self.0.metrics(id)?)
    }

    fn export_log(&self, id: &str) -> Result<Vec<u8>, CliError> {
        Ok(self.0.export_log(id)?)
    }
}

/// A running server reached over HTTP.
pub struct Remote {
    base: String,
    client: reqwest::blocking::Client,
}

impl Remote {
    pub fn new(base_url: &str) -> Result<Self, CliError> {
        Ok(Remote {
            base: base_url.trim_end_matches('/').to_string(),
            client: reqwest::blocking::Client::builder().build()?,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<Vec<u8>, CliError> {
        let resp = req.send()?;
        let status = resp.status();
        let bytes = resp.bytes()?.to_vec();
        if status.is_success() {
            return Ok(bytes);
        }
        let body = serde_json::from_slice(&bytes).unwrap_or_else(|_| ErrorBody {
            error: "http_error".into(),
            message: String::from_utf8_lossy(&bytes).into_owned(),
            field: None,
        });
        Err(CliError::Remote {
            status: status.as_u16(),
            body,
        })
    }

    fn json<T: DeserializeOwned>(&self, req: reqwest::blocking::RequestBuilder) -> Result<T, CliError> {
        let bytes = self.send(req)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Transport(format!("bad response body: {e}")))
    }

    fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, CliError> {
        let body = serde_json::to_vec(body).expect("request serializes");
        self.json(
            self.client
                .post(self.url(path))
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body),
        )
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, CliError> {
        self.json(self.client.get(self.url(path)))
    }
}

impl Backend for Remote {
    fn create_experiment(&self, config: &ExperimentConfig) -> Result<CreatedExperiment, CliError> {
        self.post_json("/api/experiments", config)
    }

    fn experiment(&self, id: &str) -> Result<ExperimentView, CliError> {
        self.get_json(&format!("/api/experiments/{id}"))
    }

    fn create_session(&self, id: &str, user_id: &str) -> Result<SessionInfo, CliError> {
        self.post_json(
            &format!("/api/experiments/{id}/sessions"),
            &CreateSession {
                user_id: Some(user_id.into()),
            },
        )
    }

    fn session(&self, session_id: &str) -> Result<SessionInfo, CliError> {
        self.get_json(&format!("/api/sessions/{session_id}"))
    }

    fn next_samples(&self, session_id: &str, k: usize) -> Result<SampleBatch, CliError> {
        self.json(self.client.post(self.url(&format!("/api/sessions/{session_id}/next?k={k}"))))
    }

    fn submit(&self, session_id: &str, events: &[RawFeedbackEvent]) -> Result<SubmitResponse, CliError> {
        let body: String = events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect();
        self.json(
            self.client
                .post(self.url(&format!("/api/sessions/{session_id}/feedback")))
                .header(reqwest::header::CONTENT_TYPE, feedback_service::http::NDJSON)
                .body(body),
        )
    }

    fn train(&self, id: &str, req: &TrainRequest) -> Result<TrainingResult, CliError> {
        self.post_json(&format!("/api/experiments/{id}/train"), req)
    }

    fn quality(&self, session_id: &str) -> Result<QualityEstimate, CliError> {
        self.get_json(&format!("/api/sessions/{session_id}/quality"))
    }

    fn metrics(&self, id: &str) -> Result<ExperimentMetrics, CliError> {
        self.get_json(&format!("/api/experiments/{id}/metrics"))
    }

    fn export_log(&self, id: &str) -> Result<Vec<u8>, CliError> {
        self.send(self.client.get(self.url(&format!("/api/experiments/{id}/log"))))
    }
}

#[derive(Debug, Clone)]
pub struct SimulationPlan {
    pub experiment_id: String,
    pub annotators: Vec<AnnotatorProfile>,
    /// Events each session submits; the last batch is cut to fit.
    pub events_per_session: usize,
    /// Episodes requested per batch; the comparison slot count when unset.
    pub batch: Option<usize>,
    /// Kinds to annotate; every enabled kind when unset.
    pub kinds: Option<BTreeSet<FeedbackKind>>,
    /// Train once all sessions are done.
    pub train: Option<TrainRequest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub session_id: String,
    pub user_id: String,
    pub submitted: usize,
    pub accepted: Vec<u64>,
    pub rejected: usize,
    pub quality: Option<QualityEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutcome {
    pub sessions: Vec<SessionOutcome>,
    pub training: Option<TrainingResult>,
}

impl SimulationOutcome {
    pub fn accepted(&self) -> usize {
        self.sessions.iter().map(|s| s.accepted.len()).sum()
    }

    pub fn submitted(&self) -> usize {
        self.sessions.iter().map(|s| s.submitted).sum()
    }
}

/// Rebuilds a served episode from its actions and checks it against the
/// payload, as a browser client replaying the episode would.
pub fn replay_payload(spec: &GridSpec, p: &RenderPayload) -> Result<EpisodeRecord, CliError> {
    let ep = episode_from_actions(spec, p.episode_id.clone(), &p.actions)?;
    let cells: Vec<_> = ep.states.iter().map(|o| o.cell).collect();
    if cells != p.states || ep.gt_rewards != p.rewards || ep.len() != p.n_steps {
        return Err(CliError::Simulation(format!(
            "episode {} does not replay to its payload",
            p.episode_id
        )));
    }
    Ok(ep)
}

/// Events of the requested kinds for one served batch.
pub fn annotate_batch(
    a: &mut SimulatedAnnotator,
    kinds: &BTreeSet<FeedbackKind>,
    config: &ExperimentConfig,
    spec: &GridSpec,
    values: &ValueTable,
    episodes: &[EpisodeRecord],
) -> Vec<RawFeedbackEvent> {
    let mut out = Vec::new();
    for kind in kinds {
        match kind {
            FeedbackKind::Evaluative => {
                for ep in episodes {
                    out.push(a.annotate_evaluative(Target::episode(ep.id.clone()), ep, spec, config.rating_scale));
                }
            }
            FeedbackKind::Comparative if episodes.len() >= 2 => {
                let options: Vec<(Target, f64)> = episodes
                    .iter()
                    .take(config.comparison_slots.max(2))
                    .map(|ep| (Target::episode(ep.id.clone()), ep.total_return))
                    .collect();
                out.push(a.annotate_comparative(&options));
            }
            FeedbackKind::Comparative => {}
            FeedbackKind::Corrective => {
                for ep in episodes {
                    if let Some(ev) = (0..ep.len()).find_map(|t| a.annotate_corrective(ep, t, values)) {
                        out.push(ev);
                    }
                }
            }
            FeedbackKind::Demonstrative => out.push(a.annotate_demonstrative(spec, values)),
            FeedbackKind::Descriptive => {
                if let Some(ep) = episodes.first() {
                    let target = Target::segment(ep.id.clone(), 0, ep.len() as u32);
                    out.extend(a.annotate_descriptive(spec, target));
                }
            }
        }
    }
    out
}

fn run_session(
    backend: &dyn Backend,
    plan: &SimulationPlan,
    view: &ExperimentView,
    values: &ValueTable,
    profile: &AnnotatorProfile,
) -> Result<SessionOutcome, CliError> {
    let config = &view.config;
    let kinds: BTreeSet<FeedbackKind> = plan
        .kinds
        .clone()
        .unwrap_or_else(|| config.enabled_feedback_types.clone());
    let info = backend.create_session(&config.experiment_id, &profile.user_id)?;
    let mut a = SimulatedAnnotator::new(profile.clone(), &info.session_id);
    let k = plan.batch.unwrap_or(config.comparison_slots);
    let mut out = SessionOutcome {
        session_id: info.session_id.clone(),
        user_id: info.user_id,
        submitted: 0,
        accepted: Vec::new(),
        rejected: 0,
        quality: None,
    };
    let mut idle = 0;
    while out.submitted < plan.events_per_session {
        let batch = backend.next_samples(&info.session_id, k)?;
        let episodes = batch
            .episodes
            .iter()
            .map(|p| replay_payload(&view.env, p))
            .collect::<Result<Vec<_>, _>>()?;
        a.phase = (out.submitted as u64 / config.progress_phase_length.max(1)) as usize;
        let mut events = annotate_batch(&mut a, &kinds, config, &view.env, values, &episodes);
        events.truncate(plan.events_per_session - out.submitted);
        if events.is_empty() {
            idle += 1;
            if idle > 100 {
                return Err(CliError::Simulation(format!(
                    "session {} produced no events for 100 batches",
                    info.session_id
                )));
            }
            continue;
        }
        idle = 0;
        let resp = backend.submit(&info.session_id, &events)?;
        out.submitted += events.len();
        out.rejected += resp.rejected();
        out.accepted.extend(resp.accepted_ids());
    }
    out.quality = match backend.quality(&info.session_id) {
        Ok(q) => Some(q),
        Err(CliError::Service(feedback_service::ServiceError::InsufficientData)) => None,
        Err(CliError::Remote { status: 422, .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(out)
}

/// Runs every annotator in its own session, concurrently, then optionally
/// trains. Sessions are reported in annotator order.
pub fn run_simulation(backend: &dyn Backend, plan: &SimulationPlan) -> Result<SimulationOutcome, CliError> {
    let view = backend.experiment(&plan.experiment_id)?;
    let values = value_iteration(&view.env, PLAN_TOL);
    let results: Vec<Result<SessionOutcome, CliError>> = std::thread::scope(|s| {
        let handles: Vec<_> = plan
            .annotators
            .iter()
            .map(|p| {
                let (view, values) = (&view, &values);
                s.spawn(move || run_session(backend, plan, view, values, p))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(CliError::Simulation("session thread panicked".into()))))
            .collect()
    });
    let sessions = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let training = plan
        .train
        .as_ref()
        .map(|req| backend.train(&plan.experiment_id, req))
        .transpose()?;
    Ok(SimulationOutcome { sessions, training })
}
