//! Offline metrics over feedback logs, shared by the service and the CLI.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{BufferError, EpisodeSource};
use crate::config::FeedbackKind;
use crate::encoding::{EpisodeId, FeedbackContent, StandardizedFeedback, Target, TargetScope};
use crate::gridworld::{step, Cell, GridSpec, Termination, ValueTable};
use crate::rationality::{
    consistency_score, decompose_beta, fit_beta, fit_beta_by_slice, BetaDecomposition, ChoiceContext,
    ChoiceObservation, Dependency, DependencyWeights, FitOptions, RationalityError, RationalityEstimate, RepeatGroup,
};
use crate::stats::{pearson, spearman};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no calibration data in the log")]
    NoCalibrationData,
    #[error("not enough calibration or repeat responses")]
    InsufficientData,
    #[error(transparent)]
    Rationality(#[from] RationalityError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
}

/// Which of the five feedback types produced a record.
pub fn record_kind(fb: &StandardizedFeedback) -> Option<FeedbackKind> {
    match &fb.content {
        FeedbackContent::Evaluation { .. } => Some(FeedbackKind::Evaluative),
        FeedbackContent::Ranking { .. } => Some(FeedbackKind::Comparative),
        FeedbackContent::Instruction { .. } => match fb.targets.as_slice() {
            [t] if matches!(t.scope, TargetScope::State { .. }) => Some(FeedbackKind::Corrective),
            _ => Some(FeedbackKind::Demonstrative),
        },
        FeedbackContent::Description { .. } => Some(FeedbackKind::Descriptive),
        FeedbackContent::Unspecified { .. } => None,
    }
}

pub fn counts_by_kind(records: &[StandardizedFeedback]) -> BTreeMap<FeedbackKind, usize> {
    let mut out = BTreeMap::new();
    for k in records.iter().filter_map(record_kind) {
        *out.entry(k).or_default() += 1;
    }
    out
}

/// Ground-truth rewards of the steps a target covers.
pub fn target_rewards(target: &Target, source: &dyn EpisodeSource) -> Result<Vec<f64>, BufferError> {
    let Some(id) = target.episode_ref() else {
        return Ok(Vec::new());
    };
    let ep = source.fetch(id)?;
    let r = &ep.gt_rewards;
    Ok(match target.scope {
        TargetScope::Episode { .. } => r.clone(),
        TargetScope::Segment { start, end, .. } => r[start as usize..(end as usize).min(r.len())].to_vec(),
        TargetScope::State { step, .. } => r.get(step as usize).map(|x| vec![*x]).unwrap_or_default(),
        TargetScope::All => Vec::new(),
    })
}

fn meta_u32(fb: &StandardizedFeedback, key: &str) -> Option<u32> {
    fb.meta.extra.get(key).and_then(serde_json::Value::as_u64).map(|v| v as u32)
}

fn meta_str<'a>(fb: &'a StandardizedFeedback, key: &str) -> Option<&'a str> {
    fb.meta.extra.get(key).and_then(serde_json::Value::as_str)
}

/// True when any target of the record refers to a calibration episode.
pub fn is_calibration(fb: &StandardizedFeedback, calibration_source: Option<&str>) -> bool {
    match calibration_source {
        None => true,
        Some(kind) => fb.episode_refs().any(|id| id.source_kind == kind),
    }
}

fn context(fb: &StandardizedFeedback, kind: FeedbackKind, task: &str) -> ChoiceContext {
    ChoiceContext {
        feedback_type: meta_str(fb, "feedback_type").unwrap_or(kind.name()).to_string(),
        task_id: task.to_string(),
        progress_phase: meta_u32(fb, "progress_phase").unwrap_or(0),
        user_id: fb.meta.user_id.clone(),
    }
}

/// Choice observations implied by comparative and corrective records.
///
/// A ranking of k targets yields k-1 sequential choices: the top target
/// among all, the second among the rest, and so on (ties end the sequence).
/// A correction is a choice among the actions other than the logged one,
/// with `Q*` as utility.
pub fn choice_observations(
    records: &[StandardizedFeedback],
    source: &dyn EpisodeSource,
    spec: &GridSpec,
    values: &ValueTable,
    calibration_source: Option<&str>,
) -> Result<Vec<ChoiceObservation>, AnalysisError> {
    let mut out = Vec::new();
    for fb in records.iter().filter(|fb| is_calibration(fb, calibration_source)) {
        let task = fb
            .episode_refs()
            .next()
            .map_or(spec.name.as_str(), |id| id.env_name.as_str());
        match (&fb.content, record_kind(fb)) {
            (FeedbackContent::Ranking { rank_indices }, _) => {
                let utils: Vec<f64> = fb
                    .targets
                    .iter()
                    .map(|t| target_rewards(t, source).map(|r| r.iter().sum()))
                    .collect::<Result<_, _>>()?;
                let mut left: Vec<usize> = (0..utils.len()).collect();
                left.sort_by_key(|&i| rank_indices[i]);
                while left.len() >= 2 {
                    if rank_indices[left[0]] == rank_indices[left[1]] {
                        break;
                    }
                    let u: Vec<f64> = left.iter().map(|&i| utils[i]).collect();
                    out.push(ChoiceObservation {
                        utilities: u,
                        chosen: 0,
                        context: context(fb, FeedbackKind::Comparative, task),
                    });
                    left.remove(0);
                }
            }
            (FeedbackContent::Instruction { actions, .. }, Some(FeedbackKind::Corrective)) if actions.len() == 1 => {
                let TargetScope::State { reference, step } = &fb.targets[0].scope else {
                    continue;
                };
                let ep = source.fetch(reference)?;
                let s = *step as usize;
                let q = values.q_values(ep.states[s].cell);
                let logged = ep.actions[s];
                let options: Vec<usize> = (0..4).filter(|&a| a != logged.index()).collect();
                let Some(chosen) = options.iter().position(|&a| a == actions[0].action.index()) else {
                    continue;
                };
                out.push(ChoiceObservation {
                    utilities: options.iter().map(|&a| q[a]).collect(),
                    chosen,
                    context: context(fb, FeedbackKind::Corrective, task),
                });
            }
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub n_obs: usize,
    pub dependencies: Vec<Dependency>,
    pub slices: Vec<RationalityEstimate>,
    pub decomposition: BetaDecomposition,
}

/// Per-slice fits over the dependencies that vary in the data (type when
/// none varies) and their uniform-α decomposition.
pub fn beta_report(observations: &[ChoiceObservation], opts: &FitOptions) -> Result<BetaReport, AnalysisError> {
    if observations.is_empty() {
        return Err(AnalysisError::NoCalibrationData);
    }
    let varies = |d: Dependency| {
        let first = &observations[0].context;
        observations.iter().any(|o| match d {
            Dependency::Type => o.context.feedback_type != first.feedback_type,
            Dependency::Task => o.context.task_id != first.task_id,
            Dependency::Progress => o.context.progress_phase != first.progress_phase,
        })
    };
    let mut deps: Vec<Dependency> = Dependency::ALL.into_iter().filter(|d| varies(*d)).collect();
    if deps.is_empty() {
        deps.push(Dependency::Type);
    }
    let estimates = fit_beta_by_slice(observations, &deps, opts)?;
    let decomposition = decompose_beta(&estimates, &DependencyWeights::Uniform)?;
    Ok(BetaReport {
        n_obs: observations.len(),
        dependencies: deps,
        slices: estimates.into_values().collect(),
        decomposition,
    })
}

/// Ground-truth return of the greedy policy of `plan`, rolled out from the
/// start cell.
pub fn greedy_return(spec: &GridSpec, plan: &ValueTable) -> (f64, Termination) {
    let mut obs = spec.initial_observation();
    let mut total = 0.0;
    for _ in 0..spec.max_steps {
        let out = step(spec, &obs, plan.greedy(obs.cell)).expect("greedy rollout stays on valid cells");
        total += out.reward;
        obs = out.observation;
        if let Some(t) = out.terminal {
            return (total, t);
        }
    }
    (total, Termination::Timeout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    /// Spearman correlation of predicted reward and `V*` over floor cells.
    pub spearman_vs_vstar: Option<f64>,
    pub policy_return: f64,
    pub optimal_return: f64,
    pub return_ratio: f64,
    pub policy_termination: Termination,
}

/// Compares a reward function against the ground truth of `spec`.
pub fn evaluate_reward(spec: &GridSpec, predict: impl Fn(Cell) -> f64) -> ModelEval {
    let truth = crate::gridworld::value_iteration(spec, 1e-10);
    let floor = spec.floor_cells();
    let pred: Vec<f64> = floor.iter().map(|&c| predict(c)).collect();
    let vstar: Vec<f64> = floor.iter().map(|&c| truth.value(c)).collect();
    let plan = crate::gridworld::value_iteration_with(spec, &predict, 1e-10);
    let (policy_return, policy_termination) = greedy_return(spec, &plan);
    let (optimal_return, _) = greedy_return(spec, &truth);
    ModelEval {
        spearman_vs_vstar: spearman(&pred, &vstar),
        policy_return,
        optimal_return,
        return_ratio: policy_return / optimal_return,
        policy_termination,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub user_id: String,
    pub groups: usize,
    pub score: f64,
}

fn target_key(t: &Target) -> String {
    serde_json::to_string(&t.scope).expect("targets serialize")
}

/// Repeat groups per user: evaluative scores on one target, and pairwise
/// choices on one unordered pair of targets.
pub fn repeat_groups(records: &[StandardizedFeedback]) -> BTreeMap<String, Vec<RepeatGroup>> {
    let mut eval: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut comp: BTreeMap<(String, String, String), Vec<bool>> = BTreeMap::new();
    for fb in records {
        let user = fb.meta.user_id.clone();
        match (&fb.content, fb.targets.as_slice()) {
            (FeedbackContent::Evaluation { score, .. }, [t]) => {
                eval.entry((user, target_key(t))).or_default().push(*score);
            }
            (FeedbackContent::Ranking { rank_indices }, [a, b]) if rank_indices[0] != rank_indices[1] => {
                let (ka, kb) = (target_key(a), target_key(b));
                let a_wins = rank_indices[0] < rank_indices[1];
                let (lo, hi, first) = if ka <= kb { (ka, kb, a_wins) } else { (kb, ka, !a_wins) };
                comp.entry((user, lo, hi)).or_default().push(first);
            }
            _ => {}
        }
    }
    let mut out: BTreeMap<String, Vec<RepeatGroup>> = BTreeMap::new();
    for ((user, _), scores) in eval.into_iter().filter(|(_, s)| s.len() >= 2) {
        out.entry(user).or_default().push(RepeatGroup::Evaluative { scores });
    }
    for ((user, _, _), first_preferred) in comp.into_iter().filter(|(_, v)| v.len() >= 2) {
        out.entry(user).or_default().push(RepeatGroup::Comparative { first_preferred });
    }
    out
}

/// Per-user consistency; users without repeats are omitted.
pub fn consistency_table(records: &[StandardizedFeedback]) -> Vec<ConsistencyRow> {
    repeat_groups(records)
        .into_iter()
        .filter_map(|(user_id, groups)| {
            let score = consistency_score(&groups).ok()?;
            Some(ConsistencyRow {
                user_id,
                groups: groups.len(),
                score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    /// Pearson correlation of calibration ratings with normalized ground truth.
    pub correlation: Option<f64>,
    pub beta_hat: Option<f64>,
    pub beta_stderr: Option<f64>,
    pub consistency: Option<f64>,
    pub calibration_responses: usize,
    pub repeat_groups: usize,
}

/// Quality metrics for one user's records, from calibration items and repeats.
pub fn quality_estimate(
    records: &[StandardizedFeedback],
    source: &dyn EpisodeSource,
    spec: &GridSpec,
    values: &ValueTable,
    calibration_source: Option<&str>,
) -> Result<QualityEstimate, AnalysisError> {
    let calib: Vec<StandardizedFeedback> = records
        .iter()
        .filter(|fb| is_calibration(fb, calibration_source))
        .cloned()
        .collect();
    let groups: Vec<RepeatGroup> = repeat_groups(records).into_values().flatten().collect();
    if calib.is_empty() && groups.is_empty() {
        return Err(AnalysisError::InsufficientData);
    }
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for fb in &calib {
        if let (FeedbackContent::Evaluation { score, .. }, [t]) = (&fb.content, fb.targets.as_slice()) {
            let r = target_rewards(t, source)?;
            if !r.is_empty() {
                scores.push(*score);
                truth.push(r.iter().sum::<f64>() / r.len() as f64 / spec.max_abs_step_reward());
            }
        }
    }
    let obs = choice_observations(&calib, source, spec, values, None)?;
    let fit = fit_beta(&obs, &FitOptions::default()).ok();
    Ok(QualityEstimate {
        correlation: pearson(&scores, &truth),
        beta_hat: fit.as_ref().map(|f| f.beta_hat),
        beta_stderr: fit.as_ref().map(|f| f.stderr),
        consistency: consistency_score(&groups).ok(),
        calibration_responses: calib.len(),
        repeat_groups: groups.len(),
    })
}

/// Episodes referenced by a set of records, deduplicated.
pub fn referenced_episodes(records: &[StandardizedFeedback]) -> Vec<EpisodeId> {
    let mut v: Vec<EpisodeId> = records.iter().flat_map(|r| r.episode_refs().cloned()).collect();
    v.sort();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::value_iteration;

    #[test]
    fn ground_truth_reward_has_ratio_one() {
        let spec = GridSpec::default_8x8();
        let eval = evaluate_reward(&spec, |c| spec.reward_for(c));
        assert_eq!(eval.return_ratio, 1.0);
        assert!((eval.optimal_return - 0.90).abs() < 1e-12);
    }

    #[test]
    fn greedy_return_of_optimal_plan() {
        let spec = GridSpec::default_8x8();
        let (ret, term) = greedy_return(&spec, &value_iteration(&spec, 1e-10));
        assert_eq!(term, Termination::Goal);
        assert!((ret - 0.90).abs() < 1e-12);
    }

    #[test]
    fn empty_log_has_no_calibration_data() {
        assert!(matches!(
            beta_report(&[], &FitOptions::default()),
            Err(AnalysisError::NoCalibrationData)
        ));
    }
}
