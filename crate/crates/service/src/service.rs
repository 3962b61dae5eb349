//! In-process feedback service. The HTTP layer is a thin wrapper over this.
//!
//! Store root layout, one directory per experiment:
//!
//! ```text
//! experiments/<id>/config.json     experiment configuration
//! experiments/<id>/feedback.log    append-only feedback records
//! experiments/<id>/sessions.jsonl  session tokens, one per line
//! experiments/<id>/buffer/         episode store (unless buffer_path is set)
//! experiments/<id>/snapshots/      NNNN.ckpt model + NNNN.json metrics
//! ```
//!
//! Sessions are serialized individually; every log append goes through the
//! experiment's single writer, which also hands out feedback ids, so log order
//! equals id order.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use feedback_core::analysis::{
    self, consistency_table, counts_by_kind, evaluate_reward, QualityEstimate,
};
use feedback_core::buffer::EpisodeStore;
use feedback_core::config::ExperimentConfig;
use feedback_core::encoding::{EpisodeId, StandardizedFeedback};
use feedback_core::gridworld::{
    rollout_policy_from, skill_ladder, value_iteration, EpisodeRecord, GridSpec, PolicyKind,
    ValueTable,
};
use feedback_core::reward_model::{
    per_episode_loss, train, DatasetOptions, EpisodeLoss, FeatureMap, ModelScorer, PreparedDataset,
    RewardModel, TrainOptions,
};
use feedback_core::sampler::{LossScorer, SampleContext, SamplerState, TriggerEvent};
use feedback_core::translator::{translate, IdAllocator, RawFeedbackEvent, DEMO_SOURCE_KIND};
use serde::{Deserialize, Serialize};

use crate::error::{event_error, ErrorBody, ServiceError};
use crate::log::FeedbackLog;
use crate::wire::*;

/// `source_kind` of episodes minted under a trained snapshot.
pub const ONLINE_SOURCE_KIND: &str = "online";
/// Calibration source used for quality estimates when none is configured.
const DEFAULT_CALIBRATION_SOURCE: &str = "calibration";
/// Exploration rate of minted episodes.
const MINT_EPSILON: f64 = 0.1;
const PLAN_TOL: f64 = 1e-9;

struct Snapshot {
    result: TrainingResult,
    model: RewardModel,
    dataset: PreparedDataset,
    plan: ValueTable,
}

struct Experiment {
    id: String,
    dir: PathBuf,
    config: ExperimentConfig,
    spec: GridSpec,
    values: ValueTable,
    store: EpisodeStore,
    log: FeedbackLog,
    /// Single-writer section: id allocation, demo ingestion and log append.
    writer: Mutex<IdAllocator>,
    snapshots: RwLock<Vec<Arc<Snapshot>>>,
    training: Mutex<()>,
    session_file: Mutex<File>,
}

struct Session {
    feedback_count: u64,
    sampler: SamplerState,
    served: BTreeSet<EpisodeId>,
    last_tick: Instant,
}

struct SessionHandle {
    session_id: String,
    user_id: String,
    experiment: Arc<Experiment>,
    state: Mutex<Session>,
}

#[derive(Serialize, Deserialize)]
struct SessionLine {
    session_id: String,
    user_id: String,
}

pub struct FeedbackService {
    root: PathBuf,
    experiments: RwLock<BTreeMap<String, Arc<Experiment>>>,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Scorer used before any snapshot exists: every episode is a cold start.
struct ColdStart;

impl LossScorer for ColdStart {
    fn episode_loss(&self, _: &EpisodeId) -> EpisodeLoss {
        EpisodeLoss {
            value: 0.0,
            cold_start: true,
            n_items: 0,
        }
    }
}

impl Experiment {
    fn calibration_source(&self) -> Option<&str> {
        self.config
            .calibration
            .as_ref()
            .map(|c| c.source_kind.as_str())
    }

    fn latest(&self) -> Option<Arc<Snapshot>> {
        self.snapshots
            .read()
            .expect("snapshot lock poisoned")
            .last()
            .cloned()
    }

    fn render(&self, ep: &EpisodeRecord, snap: Option<&Snapshot>) -> RenderPayload {
        let entry = self.store.snapshot().get(&ep.id).cloned();
        let hints = snap
            .map(|s| {
                ep.actions
                    .iter()
                    .enumerate()
                    .filter(|(t, a)| s.plan.greedy(ep.states[*t].cell) != **a)
                    .map(|(t, _)| t as u32)
                    .collect()
            })
            .unwrap_or_default();
        RenderPayload {
            episode_id: ep.id.clone(),
            states: ep.states.iter().map(|o| o.cell).collect(),
            actions: ep.actions.clone(),
            rewards: ep.gt_rewards.clone(),
            n_steps: ep.len(),
            total_return: ep.total_return,
            terminated: ep.terminated,
            labeled_count: entry.as_ref().map_or(0, |e| e.labeled_count),
            flagged: entry.is_some_and(|e| e.flagged),
            hints,
        }
    }

    /// Fills an empty buffer with the skill-ladder pool and, when calibration
    /// is configured, a separately tagged calibration pool.
    fn populate(&self) -> Result<(), ServiceError> {
        if !self.store.is_empty() {
            return Ok(());
        }
        let pool = self.config.pool;
        self.store.ingest(&skill_ladder(
            &self.spec,
            &self.values,
            pool.per_level,
            pool.seed,
        ))?;
        if let Some(kind) = self.calibration_source() {
            let per_level = pool.calibration_episodes.div_ceil(7).max(1);
            let calib: Vec<EpisodeRecord> =
                skill_ladder(&self.spec, &self.values, per_level, pool.seed + 1000)
                    .into_iter()
                    .take(pool.calibration_episodes)
                    .map(|mut e| {
                        e.id.source_kind = kind.to_string();
                        e
                    })
                    .collect();
            self.store.ingest(&calib)?;
        }
        Ok(())
    }

    fn open(
        dir: PathBuf,
        config: ExperimentConfig,
    ) -> Result<(Self, Vec<StandardizedFeedback>), ServiceError> {
        let spec = config.grid_spec().map_err(|e| ServiceError::Validation {
            field: "env".into(),
            reason: e.to_string(),
        })?;
        let values = value_iteration(&spec, PLAN_TOL);
        let store = EpisodeStore::open(
            config
                .buffer_path
                .clone()
                .unwrap_or_else(|| dir.join("buffer")),
        )?;
        let (log, records) = FeedbackLog::open(dir.join("feedback.log"))?;
        let next_demo_num = store
            .snapshot()
            .ordering()
            .iter()
            .filter(|id| id.source_kind == DEMO_SOURCE_KIND)
            .map(|id| id.episode_num + 1)
            .max()
            .unwrap_or(0);
        let ids = IdAllocator {
            next_feedback_id: records.iter().map(|r| r.feedback_id + 1).max().unwrap_or(0),
            next_demo_num,
        };
        let session_file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("sessions.jsonl"))?;
        let exp = Experiment {
            id: config.experiment_id.clone(),
            dir,
            config,
            spec,
            values,
            store,
            log,
            writer: Mutex::new(ids),
            snapshots: RwLock::new(Vec::new()),
            training: Mutex::new(()),
            session_file: Mutex::new(session_file),
        };
        exp.load_latest_snapshot()?;
        Ok((exp, records))
    }

    fn snapshot_dir(&self) -> PathBuf {
        self.dir.join("snapshots")
    }

    /// Restores the newest snapshot, rebuilding its dataset from the log
    /// prefix it was trained on.
    fn load_latest_snapshot(&self) -> Result<(), ServiceError> {
        let dir = self.snapshot_dir();
        if !dir.exists() {
            return Ok(());
        }
        let mut metas: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        metas.sort();
        let Some(last) = metas.last() else {
            return Ok(());
        };
        let result: TrainingResult = serde_json::from_slice(&fs::read(last)?)
            .map_err(|e| ServiceError::Corrupt(format!("{}: {e}", last.display())))?;
        let model =
            RewardModel::from_checkpoint(&fs::read(last.with_extension("ckpt"))?, &self.spec)?;
        let records = self.log.read_records(Some(result.metrics.log_bytes))?;
        let dataset =
            PreparedDataset::build(&records, &self.store, &self.spec, &self.dataset_options())?;
        let plan = model.plan(&self.spec, PLAN_TOL);
        let mut snaps = self.snapshots.write().expect("snapshot lock poisoned");
        // Earlier snapshots only keep their numbering.
        for _ in 1..metas.len() {
            snaps.push(Arc::new(Snapshot {
                result: result.clone(),
                model: model.clone(),
                dataset: PreparedDataset::default(),
                plan: plan.clone(),
            }));
        }
        snaps.push(Arc::new(Snapshot {
            result,
            model,
            dataset,
            plan,
        }));
        Ok(())
    }

    fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            margin: self.config.reward_model.margin,
            default_optimality: self.config.demo_optimality,
        }
    }

    fn phase_of(&self, feedback_count: u64) -> u32 {
        (feedback_count / self.config.progress_phase_length) as u32
    }
}

impl FeedbackService {
    /// Opens the store root, loading every experiment and session in it.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let root = root.as_ref().to_path_buf();
        let exp_root = root.join("experiments");
        fs::create_dir_all(&exp_root)?;
        let svc = FeedbackService {
            root,
            experiments: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(HashMap::new()),
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&exp_root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("config.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let path = dir.join("config.json");
            let config: ExperimentConfig = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display())))?;
            let (exp, records) = Experiment::open(dir.clone(), config)?;
            let exp = Arc::new(exp);
            svc.restore_sessions(&exp, &records)?;
            log::info!("loaded experiment {} ({} records)", exp.id, records.len());
            svc.experiments
                .write()
                .expect("experiment lock poisoned")
                .insert(exp.id.clone(), exp);
        }
        Ok(svc)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn restore_sessions(
        &self,
        exp: &Arc<Experiment>,
        records: &[StandardizedFeedback],
    ) -> Result<(), ServiceError> {
        let text = fs::read_to_string(exp.dir.join("sessions.jsonl"))?;
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for r in records {
            *counts.entry(r.meta.session_id.as_str()).or_default() += 1;
        }
        let mut sessions = self.sessions.write().expect("session lock poisoned");
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let Ok(s) = serde_json::from_str::<SessionLine>(line) else {
                log::warn!("skipping unreadable session line in {}", exp.id);
                continue;
            };
            let count = counts.get(s.session_id.as_str()).copied().unwrap_or(0);
            // Replays feedback triggers; served sets and cursors start over.
            let mut sampler = SamplerState::new(exp.config.session_sampler());
            for _ in 0..count {
                sampler = sampler.advance_trigger(TriggerEvent::FeedbackReceived);
            }
            sessions.insert(
                s.session_id.clone(),
                Arc::new(SessionHandle {
                    session_id: s.session_id,
                    user_id: s.user_id,
                    experiment: exp.clone(),
                    state: Mutex::new(Session {
                        feedback_count: count,
                        sampler,
                        served: BTreeSet::new(),
                        last_tick: Instant::now(),
                    }),
                }),
            );
        }
        Ok(())
    }

    fn experiment(&self, id: &str) -> Result<Arc<Experiment>, ServiceError> {
        self.experiments
            .read()
            .expect("experiment lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("experiment {id}")))
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ServiceError> {
        self.sessions
            .read()
            .expect("session lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.into()))
    }

    pub fn experiment_ids(&self) -> Vec<String> {
        self.experiments
            .read()
            .expect("experiment lock poisoned")
            .keys()
            .cloned()
            .collect()
    }

    pub fn create_experiment(
        &self,
        config: ExperimentConfig,
    ) -> Result<CreatedExperiment, ServiceError> {
        config.validate()?;
        if let Some(p) = &config.buffer_path {
            if !p.is_dir() {
                return Err(ServiceError::Validation {
                    field: "buffer_path".into(),
                    reason: format!("{} does not exist", p.display()),
                });
            }
        }
        let mut exps = self.experiments.write().expect("experiment lock poisoned");
        let id = config.experiment_id.clone();
        let dir = self.root.join("experiments").join(&id);
        if exps.contains_key(&id) || dir.join("config.json").exists() {
            return Err(ServiceError::Conflict(id));
        }
        fs::create_dir_all(&dir)?;
        let (exp, _) = Experiment::open(dir.clone(), config)?;
        exp.populate()?;
        let json = serde_json::to_vec_pretty(&exp.config).expect("config serializes");
        // Written last: a directory without config.json is ignored on restart.
        write_atomic(&dir.join("config.json"), &json)?;
        let buffer_episodes = exp.store.len();
        log::info!("created experiment {id} with {buffer_episodes} episodes");
        exps.insert(id.clone(), Arc::new(exp));
        Ok(CreatedExperiment {
            experiment_id: id,
            buffer_episodes,
        })
    }

    pub fn get_experiment(&self, id: &str) -> Result<ExperimentView, ServiceError> {
        let exp = self.experiment(id)?;
        Ok(ExperimentView {
            config: exp.config.clone(),
            env: exp.spec.clone(),
        })
    }

    pub fn create_session(
        &self,
        experiment_id: &str,
        req: CreateSession,
    ) -> Result<SessionInfo, ServiceError> {
        let exp = self.experiment(experiment_id)?;
        let user_id = req
            .user_id
            .unwrap_or_else(|| format!("anon-{:012x}", rand::random::<u64>() >> 16));
        let session_id = format!("{}-{:016x}", exp.id, rand::random::<u64>());
        let line = serde_json::to_string(&SessionLine {
            session_id: session_id.clone(),
            user_id: user_id.clone(),
        })
        .expect("session line serializes");
        {
            let mut f = exp.session_file.lock().expect("session file poisoned");
            writeln!(f, "{line}")?;
        }
        let sampler = SamplerState::new(exp.config.session_sampler());
        let info = SessionInfo {
            session_id: session_id.clone(),
            user_id: user_id.clone(),
            experiment_id: exp.id.clone(),
            feedback_count: 0,
            phase: 0,
            sampler_mode: sampler.active_mode().name().into(),
        };
        let handle = Arc::new(SessionHandle {
            session_id: session_id.clone(),
            user_id,
            experiment: exp,
            state: Mutex::new(Session {
                feedback_count: 0,
                sampler,
                served: BTreeSet::new(),
                last_tick: Instant::now(),
            }),
        });
        self.sessions
            .write()
            .expect("session lock poisoned")
            .insert(session_id, handle);
        Ok(info)
    }

    pub fn session_info(&self, session_id: &str) -> Result<SessionInfo, ServiceError> {
        let h = self.session(session_id)?;
        let s = h.state.lock().expect("session poisoned");
        Ok(SessionInfo {
            session_id: h.session_id.clone(),
            user_id: h.user_id.clone(),
            experiment_id: h.experiment.id.clone(),
            feedback_count: s.feedback_count,
            phase: h.experiment.phase_of(s.feedback_count),
            sampler_mode: s.sampler.active_mode().name().into(),
        })
    }

    pub fn next_samples(&self, session_id: &str, k: usize) -> Result<SampleBatch, ServiceError> {
        let h = self.session(session_id)?;
        let exp = &h.experiment;
        let mut s = h.state.lock().expect("session poisoned");
        let elapsed = s.last_tick.elapsed().as_millis() as u64;
        if elapsed > 0 {
            s.sampler = s.sampler.advance_trigger(TriggerEvent::Tick(elapsed));
            s.last_tick = Instant::now();
        }
        let index = exp.store.snapshot();
        let snap = exp.latest();
        let model_scorer = snap.as_ref().map(|sn| ModelScorer {
            model: &sn.model,
            dataset: &sn.dataset,
            source: &exp.store,
            ensemble: None,
        });
        let scorer: &dyn LossScorer = match &model_scorer {
            Some(m) => m,
            None => &ColdStart,
        };
        let ctx = SampleContext {
            buffer: &index,
            calibration_source: exp.calibration_source(),
            scorer: Some(scorer),
            now_ms: now_ms(),
        };
        let (batch, next) = s.sampler.next_batch(k, &ctx)?;
        let episodes = batch
            .ids
            .iter()
            .map(|id| Ok(exp.render(&exp.store.fetch(id)?, snap.as_deref())))
            .collect::<Result<Vec<_>, ServiceError>>()?;
        s.sampler = next;
        s.served.extend(batch.ids.iter().cloned());
        Ok(SampleBatch {
            mode: batch.mode,
            source: batch.source,
            phase: batch.phase,
            episodes,
        })
    }

    /// Translates, validates and logs each event. Events that fail are
    /// reported in place; the rest are stored. A disabled feedback type
    /// rejects the whole request before anything is written.
    pub fn submit_feedback(
        &self,
        session_id: &str,
        events: Vec<Result<RawFeedbackEvent, String>>,
    ) -> Result<SubmitResponse, ServiceError> {
        let h = self.session(session_id)?;
        let exp = &h.experiment;
        if let Some(kind) = events
            .iter()
            .flatten()
            .map(|e| e.payload.feedback_kind())
            .find(|k| !exp.config.is_enabled(*k))
        {
            return Err(ServiceError::DisabledFeedbackType(kind));
        }
        let mut s = h.state.lock().expect("session poisoned");
        let mut results = Vec::with_capacity(events.len());
        for (index, ev) in events.into_iter().enumerate() {
            let mut ev = match ev {
                Ok(ev) => ev,
                Err(message) => {
                    results.push(EventResult::Rejected {
                        index,
                        error: ErrorBody {
                            error: "bad_request".into(),
                            message,
                            field: None,
                        },
                    });
                    continue;
                }
            };
            ev.session_id = h.session_id.clone();
            ev.user_id = h.user_id.clone();
            ev.meta
                .entry("progress_phase".into())
                .or_insert_with(|| serde_json::json!(exp.phase_of(s.feedback_count)));
            let records = {
                let mut ids = exp.writer.lock().expect("log writer poisoned");
                let t = match translate(&ev, &exp.config, &exp.spec, &exp.store, &mut ids) {
                    Ok(t) => t,
                    Err(e) => {
                        results.push(EventResult::Rejected {
                            index,
                            error: event_error(&e),
                        });
                        continue;
                    }
                };
                exp.store.ingest(&t.new_episodes)?;
                for r in &t.records {
                    exp.log.append(r)?;
                }
                t.records
            };
            for id in records.iter().flat_map(|r| r.episode_refs()) {
                if exp.store.snapshot().contains(id) {
                    exp.store.mark_labeled(id)?;
                }
            }
            for _ in &records {
                s.sampler = s.sampler.advance_trigger(TriggerEvent::FeedbackReceived);
            }
            s.feedback_count += records.len() as u64;
            results.push(EventResult::Accepted {
                index,
                feedback_ids: records.iter().map(|r| r.feedback_id).collect(),
            });
        }
        Ok(SubmitResponse { results })
    }

    /// Trains on the current log and publishes an immutable snapshot.
    pub fn run_training(
        &self,
        experiment_id: &str,
        req: TrainRequest,
    ) -> Result<TrainingResult, ServiceError> {
        let exp = self.experiment(experiment_id)?;
        let _one_at_a_time = exp.training.lock().expect("training lock poisoned");
        let (log_bytes, log_records) = exp.log.size();
        let records = exp.log.read_records(Some(log_bytes))?;
        if records.is_empty() {
            return Err(ServiceError::EmptyDataset);
        }
        let rm = &exp.config.reward_model;
        let seed = req.seed.unwrap_or(rm.train.seed);
        let dataset =
            PreparedDataset::build(&records, &exp.store, &exp.spec, &exp.dataset_options())?;
        let m0 = RewardModel::new(FeatureMap::new(rm.features, &exp.spec), rm.model, seed);
        let opts = TrainOptions { seed, ..rm.train };
        let (model, train_log) = train(&m0, &dataset, &rm.weights, &opts)?;
        let eval = evaluate_reward(&exp.spec, |c| model.predict_cell(c));
        let plan = model.plan(&exp.spec, PLAN_TOL);

        let mut snaps = exp.snapshots.write().expect("snapshot lock poisoned");
        let snapshot_id = format!("{:04}", snaps.len() + 1);
        let minted = if req.mint_episodes > 0 {
            self.mint(&exp, &plan, req.mint_episodes, seed)?
        } else {
            0
        };
        let result = TrainingResult {
            snapshot_id: snapshot_id.clone(),
            metrics: TrainingMetrics {
                log_bytes,
                log_records,
                seed,
                items: ItemCounts {
                    evaluative: dataset.evaluative.len(),
                    comparative: dataset.comparative.len(),
                    demonstrations: dataset.demonstrations.len(),
                    corrections: dataset.corrections.len(),
                    descriptive: dataset.descriptive.len(),
                },
                final_loss: train_log
                    .last()
                    .cloned()
                    .expect("training logs at least one entry"),
                spearman_vs_vstar: eval.spearman_vs_vstar,
                policy_return: eval.policy_return,
                optimal_return: eval.optimal_return,
                return_ratio: eval.return_ratio,
                minted_episodes: minted,
            },
        };
        let dir = exp.snapshot_dir();
        fs::create_dir_all(&dir)?;
        write_atomic(
            &dir.join(format!("{snapshot_id}.ckpt")),
            &model.to_checkpoint(),
        )?;
        write_atomic(
            &dir.join(format!("{snapshot_id}.json")),
            &serde_json::to_vec_pretty(&result).expect("metrics serialize"),
        )?;
        snaps.push(Arc::new(Snapshot {
            result: result.clone(),
            model,
            dataset,
            plan,
        }));
        Ok(result)
    }

    /// Online-mode stand-in: ε-greedy rollouts under the learned reward.
    fn mint(
        &self,
        exp: &Experiment,
        plan: &ValueTable,
        n: usize,
        seed: u64,
    ) -> Result<usize, ServiceError> {
        let first = exp
            .store
            .snapshot()
            .ordering()
            .iter()
            .filter(|id| id.source_kind == ONLINE_SOURCE_KIND)
            .count() as u64;
        let eps: Vec<EpisodeRecord> = rollout_policy_from(
            &exp.spec,
            plan,
            PolicyKind::Epsilon {
                epsilon: MINT_EPSILON,
            },
            n,
            seed,
            first,
        )
        .into_iter()
        .map(|mut e| {
            e.id.source_kind = ONLINE_SOURCE_KIND.into();
            e
        })
        .collect();
        Ok(exp.store.ingest(&eps)?)
    }

    /// Raw checkpoint bytes of a published snapshot.
    pub fn snapshot_checkpoint(
        &self,
        experiment_id: &str,
        snapshot_id: &str,
    ) -> Result<Vec<u8>, ServiceError> {
        let exp = self.experiment(experiment_id)?;
        if !snapshot_id.chars().all(|c| c.is_ascii_digit()) {
            return Err(ServiceError::NotFound(format!("snapshot {snapshot_id}")));
        }
        let path = exp.snapshot_dir().join(format!("{snapshot_id}.ckpt"));
        fs::read(&path).map_err(|_| ServiceError::NotFound(format!("snapshot {snapshot_id}")))
    }

    pub fn metrics(&self, experiment_id: &str) -> Result<ExperimentMetrics, ServiceError> {
        let exp = self.experiment(experiment_id)?;
        let (log_bytes, log_records) = exp.log.size();
        let records = exp.log.read_records(Some(log_bytes))?;
        let sessions = self
            .sessions
            .read()
            .expect("session lock poisoned")
            .values()
            .filter(|h| h.experiment.id == exp.id)
            .count();
        Ok(ExperimentMetrics {
            experiment_id: exp.id.clone(),
            log_records,
            log_bytes,
            sessions,
            buffer_episodes: exp.store.len(),
            counts_by_kind: counts_by_kind(&records),
            consistency: consistency_table(&records),
            latest_snapshot: exp.latest().map(|s| s.result.clone()),
        })
    }

    /// Quality metrics of the session's user from calibration items and repeats.
    pub fn quality_estimate(&self, session_id: &str) -> Result<QualityEstimate, ServiceError> {
        let h = self.session(session_id)?;
        let exp = &h.experiment;
        let records: Vec<StandardizedFeedback> = exp
            .log
            .read_records(None)?
            .into_iter()
            .filter(|r| r.meta.user_id == h.user_id)
            .collect();
        let source = exp
            .calibration_source()
            .unwrap_or(DEFAULT_CALIBRATION_SOURCE);
        Ok(analysis::quality_estimate(
            &records,
            &exp.store,
            &exp.spec,
            &exp.values,
            Some(source),
        )?)
    }

    /// Byte-exact copy of the experiment log.
    pub fn export_log(&self, experiment_id: &str) -> Result<Vec<u8>, ServiceError> {
        self.experiment(experiment_id)?.log.read_bytes(None)
    }

    pub fn episode_render(
        &self,
        experiment_id: &str,
        episode_id: &str,
    ) -> Result<RenderPayload, ServiceError> {
        let exp = self.experiment(experiment_id)?;
        let id: EpisodeId = episode_id.parse().map_err(ServiceError::BadRequest)?;
        let ep = exp.store.fetch(&id)?;
        Ok(exp.render(&ep, exp.latest().as_deref()))
    }

    /// Every stored episode in skill order, with per-episode loss under the
    /// latest snapshot.
    pub fn list_episodes(&self, experiment_id: &str) -> Result<Vec<EpisodeSummary>, ServiceError> {
        let exp = self.experiment(experiment_id)?;
        let index = exp.store.snapshot();
        let snap = exp.latest();
        let mut out: Vec<EpisodeSummary> = index
            .iter()
            .map(|(id, e)| {
                let loss = snap.as_ref().and_then(|s| {
                    per_episode_loss(&s.model, id, &s.dataset, &exp.store, None)
                        .ok()
                        .filter(|l| !l.cold_start)
                        .map(|l| l.value)
                });
                EpisodeSummary {
                    episode_id: id.clone(),
                    skill_level: e.skill_level,
                    total_return: e.total_return,
                    episode_len: e.episode_len,
                    labeled_count: e.labeled_count,
                    flagged: e.flagged,
                    loss,
                    high_impact: false,
                }
            })
            .collect();
        let mut losses: Vec<f64> = out.iter().filter_map(|s| s.loss).collect();
        if !losses.is_empty() {
            losses.sort_by(|a, b| b.total_cmp(a));
            let cut = losses[(losses.len().div_ceil(10)).saturating_sub(1)];
            for s in &mut out {
                s.high_impact = s.loss.is_some_and(|l| l >= cut);
            }
        }
        Ok(out)
    }
}
