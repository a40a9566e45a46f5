//! The acceptance suite: nine end-to-end criteria, each reported as one
//! pass/fail line.
//!
//! Criteria 4 to 7 train models at desk scale and take minutes; the rest run
//! in seconds. The `work` directory passed to [`run`] holds the run
//! directories written by the reproducibility check.

mod gradients;
mod oracles;
mod runs;
mod suites;

use std::fmt;
use std::path::Path;
use std::time::Instant;

use crate::error::Result;

pub use runs::desk_config;

/// Identifier and short title of every criterion, in order.
pub const CRITERIA: [(u8, &str); 9] = [
    (1, "gradient correctness"),
    (2, "closed-form math"),
    (3, "reduction identity"),
    (4, "constraint satisfaction"),
    (5, "budget-performance trend"),
    (6, "learned vs random acquisition"),
    (7, "noisy-feature trade-off"),
    (8, "causality and masking"),
    (9, "reproducibility"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    /// Measured quantities against their thresholds.
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] C{} {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.seconds
        )
    }
}

/// Measured detail of a criterion and whether it met its thresholds.
pub(crate) struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

pub fn title(id: u8) -> Option<&'static str> {
    CRITERIA.iter().find(|(i, _)| *i == id).map(|(_, t)| *t)
}

/// Runs one criterion. Errors inside it count as a failure and are reported
/// in the detail.
pub fn run(id: u8, work: &Path) -> Outcome {
    let title = title(id).unwrap_or("unknown criterion");
    let start = Instant::now();
    let verdict: Result<Verdict> = match id {
        1 => gradients::check(),
        2 => oracles::check(),
        3 => runs::reduction_identity(),
        4 => runs::constraint_satisfaction(start),
        5 => runs::budget_trend(),
        6 => runs::learned_vs_random(),
        7 => runs::noisy_tradeoff(),
        8 => suites::check(),
        9 => runs::reproducibility(work),
        _ => Ok(Verdict::new(false, format!("no criterion C{id}"))),
    };
    let v = verdict.unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
    Outcome {
        id,
        title,
        passed: v.passed,
        detail: v.detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the given criteria in order, handing each outcome to `report` as
/// soon as it is known.
pub fn run_all(ids: &[u8], work: &Path, mut report: impl FnMut(&Outcome)) -> Vec<Outcome> {
    ids.iter()
        .map(|&id| {
            log::info!("running acceptance criterion C{id}");
            let o = run(id, work);
            report(&o);
            o
        })
        .collect()
}
