//! The acceptance suite: ten numbered criteria, each run headless and
//! reported as one PASS/FAIL line with its measured values.

mod encoding;
mod pipeline;
mod rationality;
pub mod records;
mod reward;
mod service;

use std::fmt;
use std::time::{Duration, Instant};

pub use rationality::{marginal_mean_oracle, simulate_factorial, Pool};

/// Measured result of one criterion, before the runtime limit is applied.
#[derive(Debug, Clone, Default)]
pub struct Check {
    pub passed: bool,
    pub measured: String,
    /// Extra diagnostics; they never change the verdict.
    pub notes: Vec<String>,
}

impl Check {
    fn new(passed: bool, measured: impl Into<String>) -> Self {
        Check {
            passed,
            measured: measured.into(),
            notes: Vec::new(),
        }
    }

    fn note(mut self, n: impl Into<String>) -> Self {
        self.notes.push(n.into());
        self
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub measured: String,
    pub notes: Vec<String>,
    pub elapsed: Duration,
    pub limit: Option<Duration>,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} criterion {:>2} {}: {} [{:.2}s",
            self.id,
            self.title,
            self.measured,
            self.elapsed.as_secs_f64()
        )?;
        if let Some(l) = self.limit {
            write!(f, " / limit {}s", l.as_secs())?;
        }
        write!(f, "]")
    }
}

pub struct Criterion {
    pub id: u8,
    pub title: &'static str,
    pub limit: Option<Duration>,
    run: fn() -> Result<Check, String>,
}

const fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

pub const CRITERIA: [Criterion; 10] = [
    Criterion { id: 1, title: "encoding round-trip", limit: secs(5), run: encoding::round_trip },
    Criterion { id: 2, title: "Boltzmann correctness", limit: secs(1), run: rationality::boltzmann },
    Criterion { id: 3, title: "beta recovery", limit: secs(60), run: rationality::beta_recovery },
    Criterion { id: 4, title: "decomposition recovery", limit: secs(120), run: rationality::decomposition_recovery },
    Criterion { id: 5, title: "gradient checks", limit: secs(30), run: reward::gradient_checks },
    Criterion { id: 6, title: "reward learning end-to-end", limit: secs(180), run: reward::reward_learning },
    Criterion { id: 7, title: "pipeline compatibility", limit: None, run: pipeline::compatibility },
    Criterion { id: 8, title: "sampler contracts", limit: None, run: pipeline::sampler_contracts },
    Criterion { id: 9, title: "service log integrity", limit: None, run: service::log_integrity },
    Criterion { id: 10, title: "consistency baseline", limit: None, run: rationality::consistency_baseline },
];

impl Criterion {
    pub fn run(&self) -> Outcome {
        let start = Instant::now();
        let check = (self.run)().unwrap_or_else(|e| Check::new(false, format!("error: {e}")));
        let elapsed = start.elapsed();
        let in_time = self.limit.is_none_or(|l| elapsed <= l);
        let mut notes = check.notes;
        if !in_time {
            notes.push(format!("exceeded the runtime limit ({:.2}s)", elapsed.as_secs_f64()));
        }
        Outcome {
            id: self.id,
            title: self.title,
            passed: check.passed && in_time,
            measured: check.measured,
            notes,
            elapsed,
            limit: self.limit,
        }
    }
}

pub fn criterion(id: u8) -> Option<&'static Criterion> {
    CRITERIA.iter().find(|c| c.id == id)
}

pub fn run_all() -> Vec<Outcome> {
    CRITERIA.iter().map(Criterion::run).collect()
}
