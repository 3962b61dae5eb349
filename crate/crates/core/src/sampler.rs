//! Chooses which stored episodes to show next.
//!
//! Modes: manual browsing, uniform random, progressive (skill-ordered),
//! query-based (highest reward-model loss first) and a state machine that
//! switches between sub-modes on feedback-count or wall-time triggers. Two
//! further modes support calibration: `Calibration` draws from the pool of
//! ground-truth calibration episodes, `Interleaved` mixes calibration batches
//! into another mode at rate ρ, and `Repeat` re-serves an earlier batch.
//!
//! Random and query-based sampling are without replacement within a pass
//! over the pool; when a pass runs out a new one starts.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::BufferIndex;
use crate::encoding::EpisodeId;
use crate::reward_model::EpisodeLoss;

/// Default progressive window as a fraction of the pool.
pub const DEFAULT_WINDOW_FRACTION: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("no episodes available to sample")]
    EmptyBuffer,
    #[error("progressive cursor is past the end of the buffer")]
    Exhausted,
    #[error("query-based sampling needs a reward model")]
    ModelRequired,
}

/// Per-episode loss oracle used by query-based sampling.
pub trait LossScorer {
    fn episode_loss(&self, id: &EpisodeId) -> EpisodeLoss;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    AfterFeedback { count: u64 },
    AfterMillis { ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub trigger: Trigger,
    pub mode: SamplerMode,
}

/// Start in `initial`; each transition fires once, in order, counting from
/// the moment the previous mode became active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial: Box<SamplerMode>,
    pub transitions: Vec<Transition>,
}

impl Schedule {
    pub fn mode_at(&self, phase: usize) -> &SamplerMode {
        if phase == 0 {
            &self.initial
        } else {
            &self.transitions[phase - 1].mode
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplerMode {
    Manual,
    Random {
        seed: u64,
    },
    Progressive {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        window: Option<usize>,
    },
    /// `pool` caps how many candidates are scored per call; 0 scores all.
    QueryBased {
        #[serde(default)]
        pool: usize,
        #[serde(default)]
        seed: u64,
    },
    Calibration {
        seed: u64,
    },
    Interleaved {
        rho: f64,
        seed: u64,
        main: Box<SamplerMode>,
    },
    Repeat {
        seed: u64,
    },
    StateMachine {
        schedule: Schedule,
    },
}

impl SamplerMode {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerMode::Manual => "manual",
            SamplerMode::Random { .. } => "random",
            SamplerMode::Progressive { .. } => "progressive",
            SamplerMode::QueryBased { .. } => "query_based",
            SamplerMode::Calibration { .. } => "calibration",
            SamplerMode::Interleaved { .. } => "interleaved",
            SamplerMode::Repeat { .. } => "repeat",
            SamplerMode::StateMachine { .. } => "state_machine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerEvent {
    FeedbackReceived,
    Tick(u64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub active: usize,
    pub feedback_since: u64,
    pub millis_since: u64,
    /// Index of each transition that has fired, in firing order.
    pub fired: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchSource {
    Main,
    Calibration,
    Repeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub ids: Vec<EpisodeId>,
    pub source: BatchSource,
    /// Name of the mode that produced the batch.
    pub mode: String,
    pub phase: u32,
}

/// Inputs that change between calls.
pub struct SampleContext<'a> {
    pub buffer: &'a BufferIndex,
    /// Episodes with this `source_kind` form the calibration pool and are
    /// excluded from the main pool.
    pub calibration_source: Option<&'a str>,
    pub scorer: Option<&'a dyn LossScorer>,
    pub now_ms: u64,
}

impl<'a> SampleContext<'a> {
    pub fn new(buffer: &'a BufferIndex) -> Self {
        SampleContext {
            buffer,
            calibration_source: None,
            scorer: None,
            now_ms: 0,
        }
    }

    fn is_calibration(&self, id: &EpisodeId) -> bool {
        self.calibration_source == Some(id.source_kind.as_str())
    }

    /// Main pool in skill order.
    fn main_pool(&self) -> Vec<&'a EpisodeId> {
        self.buffer
            .ordering()
            .iter()
            .filter(|id| !self.is_calibration(id))
            .collect()
    }

    fn calibration_pool(&self) -> Vec<&'a EpisodeId> {
        self.buffer
            .ordering()
            .iter()
            .filter(|id| self.is_calibration(id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub mode: SamplerMode,
    pub cursor: usize,
    pub served_history: Vec<(EpisodeId, u64)>,
    pub batch_history: Vec<Batch>,
    pass_served: BTreeSet<EpisodeId>,
    pub machine: Option<MachineState>,
}

impl SamplerState {
    pub fn new(mode: SamplerMode) -> Self {
        let machine = matches!(mode, SamplerMode::StateMachine { .. }).then(MachineState::default);
        SamplerState {
            mode,
            cursor: 0,
            served_history: Vec::new(),
            batch_history: Vec::new(),
            pass_served: BTreeSet::new(),
            machine,
        }
    }

    /// The mode that will serve the next batch.
    pub fn active_mode(&self) -> &SamplerMode {
        match (&self.mode, &self.machine) {
            (SamplerMode::StateMachine { schedule }, Some(m)) => schedule.mode_at(m.active),
            (mode, _) => mode,
        }
    }

    /// Selects the next batch and returns it with the successor state.
    pub fn next_batch(&self, k: usize, ctx: &SampleContext<'_>) -> Result<(Batch, SamplerState), SamplerError> {
        if k == 0 {
            return Err(SamplerError::ZeroBatch);
        }
        if ctx.buffer.is_empty() {
            return Err(SamplerError::EmptyBuffer);
        }
        let mut next = self.clone();
        let mode = self.active_mode().clone();
        let mut batch = next.batch_for(&mode, k, ctx)?;
        if let Some(m) = &self.machine {
            batch.phase = m.active as u32;
        }
        for id in &batch.ids {
            next.served_history.push((id.clone(), ctx.now_ms));
        }
        next.batch_history.push(batch.clone());
        Ok((batch, next))
    }

    fn rng(&self, seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.batch_history.len() as u64);
        rng
    }

    fn batch_for(&mut self, mode: &SamplerMode, k: usize, ctx: &SampleContext<'_>) -> Result<Batch, SamplerError> {
        let make = |ids, source, mode: &SamplerMode, phase| Batch {
            ids,
            source,
            mode: mode.name().to_string(),
            phase,
        };
        match mode {
            SamplerMode::Manual => {
                let pool = ctx.main_pool();
                if self.cursor >= pool.len() {
                    self.cursor = 0;
                }
                let ids: Vec<EpisodeId> = pool[self.cursor..].iter().take(k).map(|&id| id.clone()).collect();
                self.cursor += ids.len();
                Ok(make(ids, BatchSource::Main, mode, 0))
            }
            SamplerMode::Random { seed } => {
                let mut rng = self.rng(*seed);
                let ids = self.draw_uniform(&ctx.main_pool(), k, &mut rng)?;
                Ok(make(ids, BatchSource::Main, mode, 0))
            }
            SamplerMode::Calibration { seed } => {
                let mut rng = self.rng(*seed);
                let ids = self.draw_uniform(&ctx.calibration_pool(), k, &mut rng)?;
                Ok(make(ids, BatchSource::Calibration, mode, 0))
            }
            SamplerMode::Progressive { window } => {
                let pool = ctx.main_pool();
                if self.cursor >= pool.len() {
                    return Err(SamplerError::Exhausted);
                }
                let window = window
                    .unwrap_or_else(|| ((pool.len() as f64 * DEFAULT_WINDOW_FRACTION).round() as usize).max(1));
                let phase = (self.cursor / window) as u32;
                let ids: Vec<EpisodeId> = pool[self.cursor..].iter().take(k).map(|&id| id.clone()).collect();
                self.cursor += ids.len();
                Ok(make(ids, BatchSource::Main, mode, phase))
            }
            SamplerMode::QueryBased { pool: cap, seed } => {
                let scorer = ctx.scorer.ok_or(SamplerError::ModelRequired)?;
                let mut rng = self.rng(*seed);
                let pool = ctx.main_pool();
                let mut candidates = self.unserved(&pool);
                if candidates.len() < k {
                    self.start_pass(&pool);
                    candidates = pool.clone();
                }
                if *cap > 0 && candidates.len() > *cap {
                    let mut picked = index::sample(&mut rng, candidates.len(), *cap).into_vec();
                    picked.sort_unstable();
                    candidates = picked.into_iter().map(|i| candidates[i]).collect();
                }
                let scored: Vec<(usize, EpisodeLoss)> = candidates
                    .iter()
                    .enumerate()
                    .map(|(i, id)| (i, scorer.episode_loss(id)))
                    .collect();
                if scored.iter().all(|(_, l)| l.cold_start) {
                    // No signal yet: fall back to uniform sampling.
                    let ids = self.draw_uniform(&pool, k, &mut rng)?;
                    return Ok(make(ids, BatchSource::Main, mode, 0));
                }
                let mut order: Vec<(usize, f64)> = scored.iter().map(|(i, l)| (*i, l.value)).collect();
                order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let ids: Vec<EpisodeId> = order.iter().take(k).map(|(i, _)| candidates[*i].clone()).collect();
                self.pass_served.extend(ids.iter().cloned());
                Ok(make(ids, BatchSource::Main, mode, 0))
            }
            SamplerMode::Interleaved { rho, seed, main } => {
                let mut rng = self.rng(*seed);
                if rng.random::<f64>() < *rho && !ctx.calibration_pool().is_empty() {
                    let mut b = self.batch_for(&SamplerMode::Calibration { seed: seed.wrapping_add(1) }, k, ctx)?;
                    b.mode = mode.name().to_string();
                    Ok(b)
                } else {
                    self.batch_for(main, k, ctx)
                }
            }
            SamplerMode::Repeat { seed } => {
                let previous: Vec<&Batch> = self
                    .batch_history
                    .iter()
                    .filter(|b| b.source != BatchSource::Repeat && b.ids.len() == k)
                    .collect();
                if previous.is_empty() {
                    return Err(SamplerError::Exhausted);
                }
                let mut rng = self.rng(*seed);
                let pick = previous[rng.random_range(0..previous.len())];
                Ok(make(pick.ids.clone(), BatchSource::Repeat, mode, pick.phase))
            }
            SamplerMode::StateMachine { schedule } => {
                // Nested state machines delegate to their initial mode.
                self.batch_for(&schedule.initial, k, ctx)
            }
        }
    }

    fn unserved<'a>(&self, pool: &[&'a EpisodeId]) -> Vec<&'a EpisodeId> {
        pool.iter().copied().filter(|id| !self.pass_served.contains(*id)).collect()
    }

    fn start_pass(&mut self, pool: &[&EpisodeId]) {
        for id in pool {
            self.pass_served.remove(*id);
        }
    }

    /// Uniform draw without replacement across the current pass.
    fn draw_uniform(
        &mut self,
        pool: &[&EpisodeId],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<EpisodeId>, SamplerError> {
        if pool.is_empty() {
            return Err(SamplerError::EmptyBuffer);
        }
        let k = k.min(pool.len());
        let mut out: Vec<EpisodeId> = Vec::with_capacity(k);
        let candidates = self.unserved(pool);
        if candidates.len() >= k {
            for i in index::sample(rng, candidates.len(), k) {
                out.push(candidates[i].clone());
            }
        } else {
            out.extend(candidates.into_iter().cloned());
            self.start_pass(pool);
            let rest: Vec<&EpisodeId> = pool.iter().copied().filter(|id| !out.contains(id)).collect();
            for i in index::sample(rng, rest.len(), k - out.len()) {
                out.push(rest[i].clone());
            }
        }
        self.pass_served.extend(out.iter().cloned());
        Ok(out)
    }

    /// Feeds a trigger event to the state machine. Other modes are unchanged.
    pub fn advance_trigger(&self, event: TriggerEvent) -> SamplerState {
        let mut next = self.clone();
        let (SamplerMode::StateMachine { schedule }, Some(m)) = (&self.mode, next.machine.as_mut()) else {
            return next;
        };
        match event {
            TriggerEvent::FeedbackReceived => m.feedback_since += 1,
            TriggerEvent::Tick(ms) => m.millis_since += ms,
        }
        if let Some(t) = schedule.transitions.get(m.active) {
            let fire = match t.trigger {
                Trigger::AfterFeedback { count } => m.feedback_since >= count,
                Trigger::AfterMillis { ms } => m.millis_since >= ms,
            };
            if fire {
                m.fired.push(m.active);
                m.active += 1;
                m.feedback_since = 0;
                m.millis_since = 0;
                // Sub-modes start their own progression.
                next.cursor = 0;
            }
        }
        next
    }
}
