//! Boltzmann-rational choice model and rationality-coefficient estimation.
//!
//! A chooser facing options with utilities `u` picks option `i` with
//! probability `exp(β·u_i) / Σ_j exp(β·u_j)`. Given observed choices,
//! [`fit_beta`] finds the maximum-likelihood `β`; [`decompose_beta`] splits
//! per-slice estimates into additive per-dependency coefficients by
//! marginalizing over the other dependencies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{SamplerMode, Schedule, Transition, Trigger};

pub const DEFAULT_BETA_MAX: f64 = 100.0;
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum RationalityError {
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("all choice sets have identical utilities; β is not identifiable")]
    Degenerate,
    #[error("invalid observation {index}: {reason}")]
    InvalidObservation { index: usize, reason: String },
    #[error("missing slice {0}")]
    MissingSlice(String),
    #[error("invalid dependency weights: {0}")]
    InvalidWeights(String),
    #[error("no repeated feedback to score")]
    NoRepeats,
}

/// Numerically stable `ln Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Boltzmann choice probabilities.
pub fn boltzmann_prob(utilities: &[f64], beta: f64) -> Vec<f64> {
    if beta == f64::INFINITY {
        // Limit: uniform over the maximizers.
        let best = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = utilities.iter().filter(|&&u| u == best).count() as f64;
        return utilities.iter().map(|&u| if u == best { 1.0 / n } else { 0.0 }).collect();
    }
    let logits: Vec<f64> = utilities.iter().map(|u| beta * u).collect();
    let lse = log_sum_exp(&logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChoiceContext {
    pub feedback_type: String,
    pub task_id: String,
    pub progress_phase: u32,
    pub user_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceObservation {
    pub utilities: Vec<f64>,
    pub chosen: usize,
    pub context: ChoiceContext,
}

impl ChoiceObservation {
    pub fn new(utilities: Vec<f64>, chosen: usize) -> Self {
        ChoiceObservation {
            utilities,
            chosen,
            context: ChoiceContext::default(),
        }
    }

    fn check(&self, index: usize) -> Result<(), RationalityError> {
        let bad = |reason: String| Err(RationalityError::InvalidObservation { index, reason });
        if self.utilities.len() < 2 {
            return bad(format!("choice set of size {}", self.utilities.len()));
        }
        if self.chosen >= self.utilities.len() {
            return bad(format!("chosen index {} out of range", self.chosen));
        }
        if self.utilities.iter().any(|u| !u.is_finite()) {
            return bad("non-finite utility".into());
        }
        Ok(())
    }
}

/// How utilities are rescaled before fitting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityNormalization {
    /// Ground-truth utilities as given.
    #[default]
    Raw,
    /// Z-score within each choice set (population standard deviation).
    ZScore,
}

impl UtilityNormalization {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        match self {
            UtilityNormalization::Raw => u.to_vec(),
            UtilityNormalization::ZScore => {
                let n = u.len() as f64;
                let mean = u.iter().sum::<f64>() / n;
                let sd = (u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                if sd == 0.0 {
                    vec![0.0; u.len()]
                } else {
                    u.iter().map(|x| (x - mean) / sd).collect()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub beta_max: f64,
    pub tol: f64,
    pub normalization: UtilityNormalization,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            beta_max: DEFAULT_BETA_MAX,
            tol: DEFAULT_TOL,
            normalization: UtilityNormalization::Raw,
        }
    }
}

/// A subset of the measurable dependencies; `None` means "not conditioned on".
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextSlice {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<u32>,
}

impl ContextSlice {
    pub fn of(ctx: &ChoiceContext, deps: &[Dependency]) -> Self {
        let mut s = ContextSlice::default();
        for d in deps {
            match d {
                Dependency::Type => s.feedback_type = Some(ctx.feedback_type.clone()),
                Dependency::Task => s.task = Some(ctx.task_id.clone()),
                Dependency::Progress => s.progress = Some(ctx.progress_phase),
            }
        }
        s
    }

    pub fn value(&self, dep: Dependency) -> Option<String> {
        match dep {
            Dependency::Type => self.feedback_type.clone(),
            Dependency::Task => self.task.clone(),
            Dependency::Progress => self.progress.map(|p| p.to_string()),
        }
    }

    fn dependencies(&self) -> Vec<Dependency> {
        Dependency::ALL
            .into_iter()
            .filter(|&d| self.value(d).is_some())
            .collect()
    }
}

impl fmt::Display for ContextSlice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Dependency::ALL
            .into_iter()
            .filter_map(|d| self.value(d).map(|v| format!("{}={v}", d.name())))
            .collect();
        if parts.is_empty() {
            f.write_str("*")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalityEstimate {
    pub beta_hat: f64,
    pub stderr: f64,
    pub n_obs: usize,
    /// True when the estimate sits on a bound because the likelihood keeps rising.
    pub saturated: bool,
    pub slice: ContextSlice,
}

/// Log-likelihood and its first two derivatives in β.
fn likelihood_terms(obs: &[(Vec<f64>, usize)], beta: f64) -> (f64, f64, f64) {
    let mut l = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for (u, c) in obs {
        let logits: Vec<f64> = u.iter().map(|x| beta * x).collect();
        let lse = log_sum_exp(&logits);
        let p: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
        let mean: f64 = p.iter().zip(u).map(|(p, u)| p * u).sum();
        let var: f64 = p.iter().zip(u).map(|(p, u)| p * (u - mean).powi(2)).sum();
        l += beta * u[*c] - lse;
        d1 += u[*c] - mean;
        d2 -= var;
    }
    (l, d1, d2)
}

fn prepared(
    observations: &[ChoiceObservation],
    norm: UtilityNormalization,
) -> Result<Vec<(Vec<f64>, usize)>, RationalityError> {
    if observations.len() < 2 {
        return Err(RationalityError::TooFewObservations(observations.len()));
    }
    for (i, o) in observations.iter().enumerate() {
        o.check(i)?;
    }
    let data: Vec<(Vec<f64>, usize)> = observations
        .iter()
        .map(|o| (norm.apply(&o.utilities), o.chosen))
        .collect();
    let informative = data
        .iter()
        .any(|(u, _)| u.iter().any(|x| *x != u[0]));
    if !informative {
        return Err(RationalityError::Degenerate);
    }
    Ok(data)
}

/// Log-likelihood of the observations at a given β.
pub fn log_likelihood(observations: &[ChoiceObservation], beta: f64, norm: UtilityNormalization) -> f64 {
    let data: Vec<(Vec<f64>, usize)> = observations
        .iter()
        .map(|o| (norm.apply(&o.utilities), o.chosen))
        .collect();
    likelihood_terms(&data, beta).0
}

/// Derivative of the log-likelihood in β.
pub fn score_function(observations: &[ChoiceObservation], beta: f64, norm: UtilityNormalization) -> f64 {
    let data: Vec<(Vec<f64>, usize)> = observations
        .iter()
        .map(|o| (norm.apply(&o.utilities), o.chosen))
        .collect();
    likelihood_terms(&data, beta).1
}

/// Maximum-likelihood β on `[0, beta_max]`.
///
/// The log-likelihood is concave in β, so its derivative is non-increasing and
/// the maximizer is found by bisection on the derivative. The standard error
/// comes from the observed Fisher information at the estimate.
pub fn fit_beta(
    observations: &[ChoiceObservation],
    opts: &FitOptions,
) -> Result<RationalityEstimate, RationalityError> {
    let data = prepared(observations, opts.normalization)?;
    let grad = |b: f64| likelihood_terms(&data, b).1;

    let (beta_hat, saturated) = if grad(0.0) <= 0.0 {
        (0.0, false)
    } else if grad(opts.beta_max) >= 0.0 {
        (opts.beta_max, true)
    } else {
        let (mut lo, mut hi) = (0.0, opts.beta_max);
        while hi - lo > opts.tol {
            let mid = 0.5 * (lo + hi);
            if grad(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi), false)
    };
    let info = -likelihood_terms(&data, beta_hat).2;
    let stderr = if info > 0.0 { info.powf(-0.5) } else { f64::INFINITY };
    Ok(RationalityEstimate {
        beta_hat,
        stderr,
        n_obs: observations.len(),
        saturated,
        slice: ContextSlice::default(),
    })
}

/// Fits one estimate per combination of the given dependencies.
pub fn fit_beta_by_slice(
    observations: &[ChoiceObservation],
    deps: &[Dependency],
    opts: &FitOptions,
) -> Result<BTreeMap<ContextSlice, RationalityEstimate>, RationalityError> {
    let mut groups: BTreeMap<ContextSlice, Vec<ChoiceObservation>> = BTreeMap::new();
    for o in observations {
        groups
            .entry(ContextSlice::of(&o.context, deps))
            .or_default()
            .push(o.clone());
    }
    groups
        .into_iter()
        .map(|(slice, obs)| {
            let mut est = fit_beta(&obs, opts)?;
            est.slice = slice.clone();
            Ok((slice, est))
        })
        .collect()
}

/// The measurable dependencies of rationality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dependency {
    Type,
    Task,
    Progress,
}

impl Dependency {
    pub const ALL: [Dependency; 3] = [Dependency::Type, Dependency::Task, Dependency::Progress];

    pub fn name(self) -> &'static str {
        match self {
            Dependency::Type => "type",
            Dependency::Task => "task",
            Dependency::Progress => "progress",
        }
    }
}

/// Dependency weights for the combined predictor.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyWeights {
    /// α = 1/K for each of the K dependencies present.
    #[default]
    Uniform,
    Custom(BTreeMap<Dependency, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependencyComponent {
    pub alpha: f64,
    /// β_d for each observed value of the dependency.
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaDecomposition {
    pub k: usize,
    pub components: BTreeMap<Dependency, DependencyComponent>,
}

impl BetaDecomposition {
    /// Combined β for a context: Σ_d α_d · β_d(ctx_d). `None` if the context
    /// lacks a dependency or names an unseen value.
    pub fn predict(&self, ctx: &ContextSlice) -> Option<f64> {
        self.components.iter().try_fold(0.0, |acc, (d, comp)| {
            let v = ctx.value(*d)?;
            Some(acc + comp.alpha * comp.values.get(&v)?)
        })
    }
}

/// Decomposes per-slice estimates into per-dependency coefficients.
///
/// β_d(v) is the n_obs-weighted mean of the slice estimates with dependency
/// `d` fixed to `v`, i.e. marginalized over every other dependency. The slice
/// table must be a full factorial over the dependencies it mentions.
pub fn decompose_beta(
    estimates: &BTreeMap<ContextSlice, RationalityEstimate>,
    weights: &DependencyWeights,
) -> Result<BetaDecomposition, RationalityError> {
    let first = estimates
        .keys()
        .next()
        .ok_or_else(|| RationalityError::MissingSlice("no slices".into()))?;
    let deps = first.dependencies();
    if deps.is_empty() {
        return Err(RationalityError::MissingSlice(
            "slices condition on no dependency".into(),
        ));
    }
    if let Some(s) = estimates.keys().find(|s| s.dependencies() != deps) {
        return Err(RationalityError::MissingSlice(format!(
            "slice {s} conditions on different dependencies than {first}"
        )));
    }

    let levels: Vec<(Dependency, BTreeSet<String>)> = deps
        .iter()
        .map(|&d| (d, estimates.keys().filter_map(|s| s.value(d)).collect()))
        .collect();
    let expected: usize = levels.iter().map(|(_, v)| v.len()).product();
    if expected != estimates.len() {
        // Find one missing combination to report.
        let mut combos: Vec<Vec<(Dependency, String)>> = vec![vec![]];
        for (d, vals) in &levels {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    vals.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((*d, v.clone()));
                        c
                    })
                })
                .collect();
        }
        let present: BTreeSet<Vec<(Dependency, String)>> = estimates
            .keys()
            .map(|s| deps.iter().map(|&d| (d, s.value(d).unwrap())).collect())
            .collect();
        let missing = combos
            .into_iter()
            .find(|c| !present.contains(c))
            .map(|c| {
                c.iter()
                    .map(|(d, v)| format!("{}={v}", d.name()))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .unwrap_or_default();
        return Err(RationalityError::MissingSlice(missing));
    }

    let k = deps.len();
    let alphas: BTreeMap<Dependency, f64> = match weights {
        DependencyWeights::Uniform => deps.iter().map(|&d| (d, 1.0 / k as f64)).collect(),
        DependencyWeights::Custom(m) => {
            let mut out = BTreeMap::new();
            for &d in &deps {
                let a = *m.get(&d).ok_or_else(|| {
                    RationalityError::InvalidWeights(format!("no weight for {}", d.name()))
                })?;
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(RationalityError::InvalidWeights(format!("α_{} = {a}", d.name())));
                }
                out.insert(d, a);
            }
            let sum: f64 = out.values().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(RationalityError::InvalidWeights(format!("weights sum to {sum}")));
            }
            out
        }
    };

    let mut components = BTreeMap::new();
    for (d, vals) in &levels {
        let mut values = BTreeMap::new();
        for v in vals {
            let (num, den) = estimates
                .iter()
                .filter(|(s, _)| s.value(*d).as_ref() == Some(v))
                .fold((0.0, 0.0), |(num, den), (_, e)| {
                    (num + e.n_obs as f64 * e.beta_hat, den + e.n_obs as f64)
                });
            values.insert(v.clone(), if den > 0.0 { num / den } else { 0.0 });
        }
        components.insert(
            *d,
            DependencyComponent {
                alpha: alphas[d],
                values,
            },
        );
    }
    Ok(BetaDecomposition { k, components })
}

/// Repeated responses to the same item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepeatGroup {
    /// Scores in [-1, 1] given to one target.
    Evaluative { scores: Vec<f64> },
    /// For one pair of targets, whether the first was preferred each time.
    Comparative { first_preferred: Vec<bool> },
}

/// Agreement between repeated responses, in [0, 1].
///
/// Evaluative pairs score `1 - |a - b| / 2`; comparative pairs score 1 when
/// the ordering is preserved. The result is the mean over all response pairs
/// within each group.
pub fn consistency_score(repeats: &[RepeatGroup]) -> Result<f64, RationalityError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for g in repeats {
        match g {
            RepeatGroup::Evaluative { scores } => {
                for i in 0..scores.len() {
                    for j in i + 1..scores.len() {
                        total += 1.0 - (scores[i] - scores[j]).abs() / 2.0;
                        count += 1;
                    }
                }
            }
            RepeatGroup::Comparative { first_preferred } => {
                for i in 0..first_preferred.len() {
                    for j in i + 1..first_preferred.len() {
                        total += f64::from(u8::from(first_preferred[i] == first_preferred[j]));
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(RationalityError::NoRepeats);
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    /// Items drawn only from the calibration pool.
    Calibration,
    /// Main-task sampling, mixed with calibration items at rate ρ.
    Main,
    /// Re-serves earlier batches to measure consistency.
    Repeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CadencePhase {
    pub kind: PhaseKind,
    /// Feedback items before the next phase starts. Only the last phase may
    /// leave this open.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    /// `source_kind` of the ground-truth calibration episodes.
    pub source_kind: String,
    pub rho: f64,
    pub cadence: Vec<CadencePhase>,
    pub seed: u64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            source_kind: "calibration".into(),
            rho: 0.1,
            cadence: vec![
                CadencePhase {
                    kind: PhaseKind::Calibration,
                    items: Some(20),
                },
                CadencePhase {
                    kind: PhaseKind::Main,
                    items: None,
                },
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("calibration config: {0}")]
pub struct CalibrationConfigError(pub String);

/// Sampler schedule for the configured calibration cadence around `main`.
pub fn calibration_schedule(
    settings: &CalibrationSettings,
    main: &SamplerMode,
) -> Result<Schedule, CalibrationConfigError> {
    if !(0.0..=1.0).contains(&settings.rho) {
        return Err(CalibrationConfigError(format!("rho {} outside [0, 1]", settings.rho)));
    }
    if settings.source_kind.is_empty() {
        return Err(CalibrationConfigError("calibration source kind is empty".into()));
    }
    let Some((_, init)) = settings.cadence.split_last() else {
        return Err(CalibrationConfigError("cadence is empty".into()));
    };
    if let Some(i) = init.iter().position(|p| p.items.is_none()) {
        return Err(CalibrationConfigError(format!("phase {i} has no item count")));
    }
    let seed = settings.seed;
    let mode = |kind: PhaseKind| match kind {
        PhaseKind::Calibration => SamplerMode::Calibration { seed },
        PhaseKind::Main if settings.rho > 0.0 => SamplerMode::Interleaved {
            rho: settings.rho,
            seed,
            main: Box::new(main.clone()),
        },
        PhaseKind::Main => main.clone(),
        PhaseKind::Repeat => SamplerMode::Repeat { seed },
    };
    let phases = &settings.cadence;
    Ok(Schedule {
        initial: Box::new(mode(phases[0].kind)),
        transitions: phases
            .windows(2)
            .map(|w| Transition {
                trigger: Trigger::AfterFeedback {
                    count: w[0].items.unwrap_or(0),
                },
                mode: mode(w[1].kind),
            })
            .collect(),
    })
}
