//! Criteria that train models: the reduction identity, the constraint and
//! trend runs, the acquisition ablations and the reproducibility check.

use std::path::Path;
use std::time::Instant;

use super::Verdict;
use crate::budget::BudgetConfig;
use crate::data::{generate_dataset, Dataset};
use crate::envs::Quality;
use crate::error::{Error, Result};
use crate::eval::AcquisitionMode;
use crate::exec::Execution;
use crate::nn::{AdamConfig, MlpConfig, TransformerConfig};
use crate::policies::Mode;
use crate::train::{final_evaluation, sweep, train, train_to_dir, SweepConfig, TrainConfig};

const DATASET_EPISODES: usize = 250;
const FINAL_EVAL_EPISODES: usize = 256;

/// Training settings sized for a single laptop core.
pub fn desk_config(mode: Mode) -> TrainConfig {
    let base = TrainConfig {
        mode,
        ..TrainConfig::default()
    };
    TrainConfig {
        transformer: TransformerConfig {
            n_layers: 1,
            n_heads: 1,
            embed_dim: 32,
            context_length: 5,
            dropout: 0.1,
            causal: true,
        },
        mlp: MlpConfig {
            n_layers: 3,
            hidden: 32,
            dropout: 0.1,
        },
        optimizer: Some(AdamConfig {
            lr: 1e-3,
            ..base.optimizer()
        }),
        steps: 20_000,
        batch_size: 16,
        eval_every: 2_000,
        eval_episodes: 64,
        selection_slack: 0.02,
        ..base
    }
}

fn expert_data(env: &str) -> Result<Dataset> {
    generate_dataset(env, Quality::Expert, DATASET_EPISODES, 0, Execution::default())
}

pub(super) fn reduction_identity() -> Result<Verdict> {
    let ds = generate_dataset("chainrunner", Quality::Medium, 50, 1, Execution::default())?;
    let small = |mode: Mode| TrainConfig {
        transformer: TransformerConfig {
            embed_dim: 16,
            context_length: 4,
            ..desk_config(mode).transformer
        },
        steps: 500,
        batch_size: 8,
        eval_every: 250,
        eval_episodes: 8,
        seed: 17,
        ..desk_config(mode)
    };
    let bdt_cfg = TrainConfig {
        force_full_masks: true,
        ..small(Mode::Bdt)
    };
    let bdt = train(&bdt_cfg, &ds)?;
    let dt = train(&small(Mode::Dt), &ds)?;
    let logs_equal = bdt.log.steps_csv() == dt.log.steps_csv() && bdt.log.evals_csv() == dt.log.evals_csv();
    let bits_equal = bdt.log == dt.log;
    let params_equal = dt
        .final_policy
        .params
        .iter()
        .all(|(name, t)| bdt.final_policy.params.get(name) == Some(t));
    let gamma_zero = bdt.log.steps.iter().all(|r| r.gamma == 0.0);
    Ok(Verdict::new(
        logs_equal && bits_equal && params_equal && gamma_zero,
        format!(
            "{} steps: traces {}, shared parameters {}, gamma {}",
            bdt.log.steps.len(),
            if bits_equal && logs_equal { "bit-identical" } else { "differ" },
            if params_equal { "bit-identical" } else { "differ" },
            if gamma_zero { "0 throughout" } else { "became positive" },
        ),
    ))
}

pub(super) fn constraint_satisfaction(start: Instant) -> Result<Verdict> {
    const C: f64 = 0.25;
    const MAX_COST: f64 = 0.27;
    const MAX_SECONDS: f64 = 900.0;
    let ds = expert_data("gridnav")?;
    let mut cfg = desk_config(Mode::Bdt);
    cfg.budget.constraint = C;
    let out = train(&cfg, &ds)?;
    let s = final_evaluation(&cfg, &ds, &out.policy, AcquisitionMode::Policy, FINAL_EVAL_EPISODES)?
        .metrics
        .summary();
    let secs = start.elapsed().as_secs_f64();
    let monotone = out.log.gamma_nondecreasing();
    let cost = s.mean_step_cost.mean;
    Ok(Verdict::new(
        cost <= MAX_COST && monotone && secs <= MAX_SECONDS,
        format!(
            "C={C}: achieved cost {cost:.4} (limit {MAX_COST}), gamma {} (final {:.3}), score {:.1}, {} steps on {} episodes in {secs:.0} s (limit {MAX_SECONDS:.0})",
            if monotone { "nondecreasing" } else { "decreased" },
            out.penalty.gamma,
            s.normalized_score.mean,
            cfg.steps,
            ds.episodes.len(),
        ),
    ))
}

pub(super) fn budget_trend() -> Result<Verdict> {
    const MIN_FULL: f64 = 90.0;
    const NOISE: f64 = 5.0;
    let ds = expert_data("chainrunner")?;
    let cfg = TrainConfig {
        steps: 1_500,
        eval_every: 500,
        eval_episodes: 32,
        ..desk_config(Mode::Bdt)
    };
    let sc = SweepConfig {
        constraints: vec![1.0, 0.75, 0.5, 0.25],
        seeds: vec![0, 1, 2],
        eval_episodes: 128,
        execution: Execution::Sequential,
    };
    let r = sweep(&cfg, &ds, &sc)?;
    let failed = r.runs.iter().filter(|x| x.error.is_some()).count();
    let full = r
        .rows
        .iter()
        .find(|x| x.constraint == 1.0)
        .map(|x| x.normalized_score.mean)
        .unwrap_or(f64::NAN);
    let rises = r.score_increases(NOISE);
    let table: Vec<String> = r
        .by_tightening()
        .iter()
        .map(|x| {
            format!(
                "C={}: {:.1}±{:.1} at cost {:.3}",
                x.constraint, x.normalized_score.mean, x.normalized_score.sd, x.mean_step_cost.mean
            )
        })
        .collect();
    Ok(Verdict::new(
        failed == 0 && full >= MIN_FULL && rises.is_empty(),
        format!(
            "{}; C=1 needs >= {MIN_FULL}; rises above {NOISE}: {rises:?}; failed runs {failed}",
            table.join(", ")
        ),
    ))
}

pub(super) fn learned_vs_random() -> Result<Verdict> {
    const C: f64 = 0.25;
    const COST_MATCH: f64 = 0.03;
    const RATIO: f64 = 2.0;
    let ds = expert_data("gridnav-keyed")?;
    let mut cfg = TrainConfig {
        steps: 3_000,
        eval_every: 1_000,
        ..desk_config(Mode::Bdt)
    };
    cfg.budget.constraint = C;
    let out = train(&cfg, &ds)?;
    let eval = |acq| -> Result<(f64, f64)> {
        let s = final_evaluation(&cfg, &ds, &out.policy, acq, FINAL_EVAL_EPISODES)?
            .metrics
            .summary();
        Ok((s.normalized_score.mean, s.mean_step_cost.mean))
    };
    let (learned, cost) = eval(AcquisitionMode::Policy)?;
    // Free features cost nothing, so Random(p) has expected cost p.
    let (random, random_cost) = eval(AcquisitionMode::Random(cost.clamp(0.0, 1.0)))?;
    let (none, _) = eval(AcquisitionMode::NoInfo)?;
    let matched = (random_cost - cost).abs() <= COST_MATCH;
    let ratio_ok = learned >= RATIO * random;
    // "Near" the no-information baseline: closer to it than to the learned score.
    let near = (random - none).abs() <= (learned - random).abs();
    Ok(Verdict::new(
        matched && ratio_ok && near,
        format!(
            "learned {learned:.1} at cost {cost:.3}; random {random:.1} at cost {random_cost:.3} (match within {COST_MATCH}); no-info {none:.1}; learned/random {} (needs >= {RATIO}); random {} no-info",
            if random > 0.0 { format!("{:.2}", learned / random) } else { "inf".into() },
            if near { "nearer to" } else { "far from" },
        ),
    ))
}

pub(super) fn noisy_tradeoff() -> Result<Verdict> {
    const BUDGET_FRACTION: f64 = 0.25;
    let exact = expert_data("chainrunner-min+noisy:N")?;
    let tiers = expert_data("chainrunner-min+noisy")?;
    let max_cost = crate::envs::make_env("chainrunner-min+noisy:N")?.spec().features.l1();
    let budget = BudgetConfig {
        constraint: BUDGET_FRACTION * max_cost,
        normalized: false,
        ..BudgetConfig::default()
    };
    let cfg = TrainConfig {
        budget,
        steps: 3_000,
        eval_every: 1_000,
        ..desk_config(Mode::Bdt)
    };
    let run = |ds: &Dataset| -> Result<(f64, f64, f64)> {
        let out = train(&cfg, ds)?;
        let r = final_evaluation(&cfg, ds, &out.policy, AcquisitionMode::Policy, FINAL_EVAL_EPISODES)?;
        let spec = &out.policy.cfg.features;
        let (mut cheap, mut all) = (0usize, 0usize);
        for e in &r.traces {
            for q in &e.masks {
                for i in (0..spec.m()).filter(|&i| q.get(i)) {
                    all += 1;
                    if !spec.names()[i].ends_with("@n") {
                        cheap += 1;
                    }
                }
            }
        }
        let s = r.metrics.summary();
        let frac = if all == 0 { 0.0 } else { cheap as f64 / all as f64 };
        Ok((s.normalized_score.mean, s.mean_step_cost.mean * spec.l1(), frac))
    };
    let (a, a_cost, _) = run(&exact)?;
    let (b, b_cost, frac) = run(&tiers)?;
    let limit = budget.constraint;
    Ok(Verdict::new(
        b >= a && frac > 0.5,
        format!(
            "budget {limit} raw units per step; exact-only {a:.1} at {a_cost:.2}; with noisy tiers {b:.1} at {b_cost:.2}; cheap-tier share of acquisitions {:.1}% (needs > 50%)",
            100.0 * frac
        ),
    ))
}

fn dir_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        out.push((p.file_name().unwrap_or_default().to_string_lossy().into_owned(), bytes));
    }
    out.sort();
    Ok(out)
}

pub(super) fn reproducibility(work: &Path) -> Result<Verdict> {
    let ds = generate_dataset("gridnav", Quality::Medium, 40, 5, Execution::default())?;
    let mut cfg = TrainConfig {
        steps: 300,
        eval_every: 100,
        eval_episodes: 16,
        seed: 23,
        ..desk_config(Mode::Bdt)
    };
    cfg.budget.constraint = 0.3;
    let dirs = [work.join("reproducibility_a"), work.join("reproducibility_b")];
    for d in &dirs {
        if d.exists() {
            std::fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        train_to_dir(&cfg, &ds, d)?;
    }
    let a = dir_files(&dirs[0])?;
    let b = dir_files(&dirs[1])?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same = a.len() == b.len() && differing.is_empty();
    Ok(Verdict::new(
        same,
        format!(
            "{} files per run directory; {}",
            a.len(),
            if same {
                "all byte-identical".to_string()
            } else {
                format!("differing: {differing:?}")
            }
        ),
    ))
}
