//! `feedback-analysis`: offline reports over an experiment directory, and
//! headless simulation runs against the feedback service.
//!
//! Exits 0 on success, 1 on any error or failed criterion, 2 on bad usage.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use feedback_analysis::commands::*;
use feedback_analysis::criteria;
use feedback_analysis::simulate::*;
use feedback_analysis::{AnalysisReport, CliError, ExperimentInputs, InputPaths};
use feedback_core::annotator::AnnotatorProfile;
use feedback_core::config::{ExperimentConfig, FeedbackKind};
use feedback_core::rationality::FitOptions;
use feedback_service::wire::TrainRequest;
use feedback_service::{FeedbackService, ServiceError};

#[derive(Parser)]
#[command(name = "feedback-analysis", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rationality estimates from calibration choices.
    BetaReport(Offline),
    /// Ground-truth evaluation of a reward-model snapshot.
    ModelEval {
        #[command(flatten)]
        input: Offline,
        /// Snapshot id under `snapshots/`; the latest when unset.
        #[arg(long, conflicts_with = "checkpoint")]
        snapshot: Option<String>,
        /// Checkpoint file outside the experiment directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-user agreement on repeated items.
    Consistency(Offline),
    /// Every section the experiment supports.
    Report(Offline),
    /// Simulated annotators against an embedded or remote service.
    Simulate(Simulate),
}

#[derive(Args)]
struct Offline {
    /// Experiment directory (holds config.json, feedback.log, buffer/).
    dir: PathBuf,
    #[arg(long)]
    json: bool,
    /// Episode `source_kind` counted as calibration data.
    #[arg(long, conflicts_with = "all_records")]
    calibration_source: Option<String>,
    /// Treat every record as calibration data.
    #[arg(long)]
    all_records: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    buffer: Option<PathBuf>,
}

impl Offline {
    fn load(&self) -> Result<ExperimentInputs, CliError> {
        ExperimentInputs::load(&InputPaths {
            dir: self.dir.clone(),
            config: self.config.clone(),
            log: self.log.clone(),
            buffer: self.buffer.clone(),
        })
    }

    fn filter(&self) -> CalibrationFilter {
        match (&self.calibration_source, self.all_records) {
            (_, true) => CalibrationFilter::All,
            (Some(s), false) => CalibrationFilter::Source(s.clone()),
            (None, false) => CalibrationFilter::Configured,
        }
    }

    fn emit(&self, r: &AnalysisReport) {
        print!("{}", if self.json { r.to_json() } else { r.to_text() });
    }
}

#[derive(Args)]
struct Simulate {
    /// Run acceptance criteria instead (all when no ids are given).
    #[arg(long, num_args = 0.., value_name = "ID")]
    criteria: Option<Vec<u8>>,
    /// Service store root for an in-process service; a scratch directory
    /// when neither this nor --url is given.
    #[arg(long, conflicts_with = "url")]
    store: Option<PathBuf>,
    /// Base URL of a running server.
    #[arg(long)]
    url: Option<String>,
    /// Experiment to use; created from --config or defaults when missing.
    #[arg(long, default_value = "simulation")]
    experiment: String,
    /// Experiment config JSON for a new experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    users: usize,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    /// Events per session.
    #[arg(long, default_value_t = 100)]
    events: usize,
    /// Episodes per batch.
    #[arg(long)]
    batch: Option<usize>,
    /// Feedback kinds to annotate, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    kinds: Option<Vec<FeedbackKind>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train a snapshot after the sessions finish.
    #[arg(long)]
    train: bool,
    /// Episodes rolled out under the new snapshot.
    #[arg(long, default_value_t = 0, requires = "train")]
    mint: usize,
    #[arg(long)]
    json: bool,
}

fn parse_kind(s: &str) -> Result<FeedbackKind, String> {
    FeedbackKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown feedback kind {s:?}"))
}

fn run_criteria(ids: &[u8]) -> Result<bool, CliError> {
    let selected: Vec<&criteria::Criterion> = if ids.is_empty() {
        criteria::CRITERIA.iter().collect()
    } else {
        ids.iter()
            .map(|&id| criteria::criterion(id).ok_or_else(|| CliError::NotFound(format!("criterion {id}"))))
            .collect::<Result<_, _>>()?
    };
    let mut all = true;
    for c in selected {
        let o = c.run();
        println!("{o}");
        for n in &o.notes {
            println!("    note: {n}");
        }
        all &= o.passed;
    }
    Ok(all)
}

fn run_simulate(args: &Simulate) -> Result<bool, CliError> {
    if let Some(ids) = &args.criteria {
        return run_criteria(ids);
    }
    let scratch;
    let backend: Box<dyn Backend> = match (&args.url, &args.store) {
        (Some(url), _) => Box::new(Remote::new(url)?),
        (None, Some(store)) => Box::new(Embedded(Arc::new(FeedbackService::open(store)?))),
        (None, None) => {
            scratch = tempfile::tempdir().map_err(|e| CliError::Simulation(e.to_string()))?;
            Box::new(Embedded(Arc::new(FeedbackService::open(scratch.path())?)))
        }
    };
    let experiment_id = match backend.experiment(&args.experiment) {
        Ok(view) => view.config.experiment_id,
        Err(CliError::Service(ServiceError::NotFound(_))) | Err(CliError::Remote { status: 404, .. }) => {
            let mut config: ExperimentConfig = match &args.config {
                Some(p) => {
                    let bytes = std::fs::read(p).map_err(|source| CliError::Io { path: p.clone(), source })?;
                    serde_json::from_slice(&bytes).map_err(|e| CliError::BadInput {
                        path: p.clone(),
                        reason: e.to_string(),
                    })?
                }
                None => ExperimentConfig::default(),
            };
            config.experiment_id = args.experiment.clone();
            backend.create_experiment(&config)?.experiment_id
        }
        Err(e) => return Err(e),
    };
    let plan = SimulationPlan {
        experiment_id,
        annotators: (0..args.users)
            .map(|u| AnnotatorProfile::uniform(&format!("sim-{u}"), args.beta, args.seed.wrapping_add(u as u64)))
            .collect(),
        events_per_session: args.events,
        batch: args.batch,
        kinds: args.kinds.as_ref().map(|k| k.iter().copied().collect::<BTreeSet<_>>()),
        train: args.train.then_some(TrainRequest {
            seed: Some(args.seed),
            mint_episodes: args.mint,
        }),
    };
    let outcome = run_simulation(backend.as_ref(), &plan)?;
    let rejected: usize = outcome.sessions.iter().map(|s| s.rejected).sum();
    if args.json {
        let sessions: Vec<_> = outcome
            .sessions
            .iter()
            .map(|s| {
                serde_json::json!({
                    "session_id": s.session_id,
                    "user_id": s.user_id,
                    "submitted": s.submitted,
                    "accepted": s.accepted.len(),
                    "rejected": s.rejected,
                    "quality": s.quality,
                })
            })
            .collect();
        let out = serde_json::json!({
            "experiment_id": plan.experiment_id,
            "sessions": sessions,
            "training": outcome.training,
        });
        println!("{}", serde_json::to_string_pretty(&out).expect("summary serializes"));
    } else {
        println!("experiment {}", plan.experiment_id);
        for s in &outcome.sessions {
            println!(
                "  {:<12}{:<12}submitted {:>6}  accepted {:>6}  rejected {:>4}",
                s.session_id,
                s.user_id,
                s.submitted,
                s.accepted.len(),
                s.rejected
            );
        }
        if let Some(t) = &outcome.training {
            println!("  trained snapshot {}", t.snapshot_id);
        }
    }
    Ok(rejected == 0)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::BetaReport(o) => {
            let inp = o.load()?;
            let mut r = AnalysisReport::new(provenance(&inp));
            r.beta = Some(cmd_beta_report(&inp, &o.filter(), &FitOptions::default())?);
            o.emit(&r);
        }
        Command::ModelEval {
            input,
            snapshot,
            checkpoint,
        } => {
            let inp = input.load()?;
            let (id, path) = match checkpoint {
                Some(p) => (p.display().to_string(), p),
                None => inp.snapshot_checkpoint(snapshot.as_deref())?,
            };
            let mut r = AnalysisReport::new(provenance(&inp));
            r.model = Some(cmd_model_eval(&inp.spec, &id, &path)?);
            input.emit(&r);
        }
        Command::Consistency(o) => {
            let inp = o.load()?;
            let mut r = AnalysisReport::new(provenance(&inp));
            r.consistency = Some(cmd_consistency(&inp));
            o.emit(&r);
        }
        Command::Report(o) => {
            let inp = o.load()?;
            o.emit(&cmd_report(&inp, &o.filter(), &FitOptions::default())?);
        }
        Command::Simulate(s) => return run_simulate(&s),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
