//! The analysis report and its two renderings: an aligned text table and
//! pretty-printed JSON. Both are deterministic for identical inputs.

use std::collections::BTreeMap;
use std::fmt::Write;

use feedback_core::analysis::{BetaReport, ConsistencyRow, ModelEval};
use feedback_core::config::FeedbackKind;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment_id: String,
    pub log_sha256: String,
    pub log_bytes: u64,
    pub log_records: usize,
    pub config_sha256: String,
    pub buffer_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub snapshot: String,
    pub checkpoint_sha256: String,
    #[serde(flatten)]
    pub eval: ModelEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<BetaReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<BTreeMap<FeedbackKind, usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<Vec<ConsistencyRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
}

impl AnalysisReport {
    pub fn new(provenance: Provenance) -> Self {
        AnalysisReport {
            provenance,
            beta: None,
            counts: None,
            consistency: None,
            model: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let p = &self.provenance;
        let _ = writeln!(out, "experiment     {}", p.experiment_id);
        let _ = writeln!(out, "log sha256     {} ({} records, {} bytes)", p.log_sha256, p.log_records, p.log_bytes);
        let _ = writeln!(out, "config sha256  {}", p.config_sha256);
        let _ = writeln!(out, "buffer         {} episodes", p.buffer_episodes);
        if let Some(b) = &self.beta {
            write_beta(&mut out, b);
        }
        if let Some(counts) = &self.counts {
            let _ = writeln!(out, "\nfeedback counts");
            for k in FeedbackKind::ALL {
                let _ = writeln!(out, "  {:<14}{:>8}", k.name(), counts.get(&k).copied().unwrap_or(0));
            }
        }
        if let Some(rows) = &self.consistency {
            let _ = writeln!(out, "\nconsistency\n  {:<20}{:>8}{:>10}", "user", "groups", "score");
            for r in rows {
                let _ = writeln!(out, "  {:<20}{:>8}{:>10.4}", r.user_id, r.groups, r.score);
            }
            if rows.is_empty() {
                let _ = writeln!(out, "  (no repeats)");
            }
        }
        if let Some(m) = &self.model {
            let e = &m.eval;
            let _ = writeln!(out, "\nreward model   snapshot {} sha256 {}", m.snapshot, m.checkpoint_sha256);
            let _ = writeln!(out, "  spearman vs V*   {}", fmt_opt(e.spearman_vs_vstar));
            let _ = writeln!(out, "  policy return    {:.6} ({:?})", e.policy_return, e.policy_termination);
            let _ = writeln!(out, "  optimal return   {:.6}", e.optimal_return);
            let _ = writeln!(out, "  return ratio     {:.6}", e.return_ratio);
        }
        out
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"))
}

fn write_beta(out: &mut String, b: &BetaReport) {
    let deps: Vec<&str> = b.dependencies.iter().map(|d| d.name()).collect();
    let _ = writeln!(out, "\nrationality    {} choices, conditioned on {}", b.n_obs, deps.join(", "));
    let _ = writeln!(out, "  {:<36}{:>8}{:>12}{:>12}", "slice", "n", "beta", "stderr");
    for s in &b.slices {
        let flag = if s.saturated { " (saturated)" } else { "" };
        let _ = writeln!(
            out,
            "  {:<36}{:>8}{:>12.4}{:>12.4}{flag}",
            s.slice.to_string(),
            s.n_obs,
            s.beta_hat,
            s.stderr
        );
    }
    let _ = writeln!(out, "  decomposition (K = {})", b.decomposition.k);
    for (d, comp) in &b.decomposition.components {
        for (v, beta) in &comp.values {
            let _ = writeln!(out, "    {:<10}{:<24}alpha {:.4}  beta_d {:.4}", d.name(), v, comp.alpha, beta);
        }
    }
}
