//! One training run per (constraint, seed), each followed by a final
//! evaluation, summarized per constraint.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{final_evaluation, train, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{AcquisitionMode, Stat};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub constraints: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Episodes of the final evaluation of each run.
    pub eval_episodes: usize,
    /// Whether runs themselves execute concurrently.
    pub execution: Execution,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            constraints: vec![0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2],
            eval_episodes: 256,
            execution: Execution::Sequential,
        }
    }
}

/// Outcome of one run; `error` is set when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub constraint: f64,
    pub seed: u64,
    pub mean_step_cost: Option<f64>,
    pub normalized_score: Option<f64>,
    pub final_gamma: Option<f64>,
    pub error: Option<String>,
}

/// Aggregate over the seeds of one constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub constraint: f64,
    pub runs: usize,
    pub mean_step_cost: Stat,
    pub normalized_score: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// `constraint,seed,mean_step_cost,normalized_score,final_gamma,error`.
    pub fn runs_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("constraint,seed,mean_step_cost,normalized_score,final_gamma,error\n");
        for r in &self.runs {
            let err = r.error.as_deref().unwrap_or("").replace(['\n', ','], " ");
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.constraint,
                r.seed,
                opt(r.mean_step_cost),
                opt(r.normalized_score),
                opt(r.final_gamma),
                err
            )
            .expect("string write");
        }
        s
    }

    /// `constraint,runs,cost_mean,cost_sd,score_mean,score_sd`.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("constraint,runs,cost_mean,cost_sd,score_mean,score_sd\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{}",
                r.constraint,
                r.runs,
                r.mean_step_cost.mean,
                r.mean_step_cost.sd,
                r.normalized_score.mean,
                r.normalized_score.sd
            )
            .expect("string write");
        }
        s
    }

    /// Rows ordered from the loosest to the tightest constraint.
    pub fn by_tightening(&self) -> Vec<&SweepRow> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.constraint.total_cmp(&a.constraint));
        rows
    }

    /// Tightening steps where the mean score rose by more than `tol`.
    pub fn score_increases(&self, tol: f64) -> Vec<(f64, f64)> {
        self.by_tightening()
            .windows(2)
            .filter(|w| w[1].normalized_score.mean > w[0].normalized_score.mean + tol)
            .map(|w| (w[0].constraint, w[1].constraint))
            .collect()
    }

    /// Tightening steps where the mean achieved cost rose by more than `tol`.
    pub fn cost_increases(&self, tol: f64) -> Vec<(f64, f64)> {
        self.by_tightening()
            .windows(2)
            .filter(|w| w[1].mean_step_cost.mean > w[0].mean_step_cost.mean + tol)
            .map(|w| (w[0].constraint, w[1].constraint))
            .collect()
    }
}

fn run_one(base: &TrainConfig, ds: &Dataset, constraint: f64, seed: u64, eval_episodes: usize) -> Result<SweepRun> {
    let mut cfg = base.clone();
    cfg.budget.constraint = constraint;
    cfg.seed = seed;
    let out = train(&cfg, ds)?;
    let acquisition = if cfg.force_full_masks {
        AcquisitionMode::Full
    } else {
        AcquisitionMode::Policy
    };
    let s = final_evaluation(&cfg, ds, &out.policy, acquisition, eval_episodes)?
        .metrics
        .summary();
    Ok(SweepRun {
        constraint,
        seed,
        mean_step_cost: Some(s.mean_step_cost.mean),
        normalized_score: Some(s.normalized_score.mean),
        final_gamma: Some(out.penalty.gamma),
        error: None,
    })
}

/// Trains one model per constraint and seed. A failed run is recorded and
/// the sweep continues.
pub fn sweep(base: &TrainConfig, ds: &Dataset, sc: &SweepConfig) -> Result<SweepResult> {
    if sc.constraints.is_empty() || sc.seeds.is_empty() {
        return Err(Error::Config("constraints and seeds must be nonempty".into()));
    }
    if let Some(c) = sc.constraints.iter().find(|c| !(**c >= 0.0)) {
        return Err(Error::Config(format!("constraints: {c} must be nonnegative")));
    }
    base.validate()?;
    let jobs: Vec<(f64, u64)> = sc
        .constraints
        .iter()
        .flat_map(|&c| sc.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs = sc.execution.map(&jobs, |&(c, s)| {
        run_one(base, ds, c, s, sc.eval_episodes).unwrap_or_else(|e| {
            log::error!("run with constraint {c}, seed {s} failed: {e}");
            SweepRun {
                constraint: c,
                seed: s,
                mean_step_cost: None,
                normalized_score: None,
                final_gamma: None,
                error: Some(e.to_string()),
            }
        })
    });
    let rows = sc
        .constraints
        .iter()
        .map(|&c| {
            let ok: Vec<&SweepRun> = runs.iter().filter(|r| r.constraint == c && r.error.is_none()).collect();
            let col = |f: fn(&SweepRun) -> Option<f64>| Stat::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SweepRow {
                constraint: c,
                runs: ok.len(),
                mean_step_cost: col(|r| r.mean_step_cost),
                normalized_score: col(|r| r.normalized_score),
            }
        })
        .collect();
    Ok(SweepResult { runs, rows })
}
