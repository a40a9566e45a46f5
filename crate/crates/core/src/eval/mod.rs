//! Closed-loop evaluation: rollouts with cost accounting, acquisition
//! heatmaps, and CSV export.

mod export;

use serde::{Deserialize, Serialize};

use crate::budget::{query_cost, QueryMask};
use crate::data::{normalized_score, Dataset};
use crate::envs::{make_env, Quality, ReferenceScores};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::policies::{with_free_features, Acquire, Agent, Policy};
use crate::rng::{self, tag};

pub use export::{heatmap_csv, metrics_csv, write_heatmap, write_metrics, METRICS_HEADER};

/// Mask selection during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionMode {
    /// The policy's own acquisition.
    Policy,
    /// Each feature acquired independently with probability `p`.
    Random(f64),
    /// Every feature.
    Full,
    /// Free features only.
    NoInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub episodes: usize,
    /// Initial desired return; required.
    pub target_rtg: f64,
    pub seed: u64,
    pub acquisition: AcquisitionMode,
    pub execution: Execution,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            episodes: 256,
            target_rtg: 0.0,
            seed: 0,
            acquisition: AcquisitionMode::Policy,
            execution: Execution::default(),
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if let AcquisitionMode::Random(p) = self.acquisition {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("random acquisition rate {p} not in [0, 1]")));
            }
        }
        if !self.target_rtg.is_finite() {
            return Err(Error::Config(format!("target rtg {} is not finite", self.target_rtg)));
        }
        Ok(())
    }
}

/// Default desired return: the mean return of the dataset's expert
/// episodes, or the stored expert reference when there are none.
pub fn default_target_rtg(ds: &Dataset) -> f64 {
    ds.mean_return(Some(Quality::Expert))
        .unwrap_or(ds.manifest.reference.expert)
}

/// Everything recorded during one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub masks: Vec<QueryMask>,
    pub rewards: Vec<f64>,
    /// Desired return fed to the policy at each step.
    pub targets: Vec<f64>,
    pub success: Option<bool>,
}

/// Per-episode metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub normalized_score: f64,
    pub mean_step_cost: f64,
    pub length: usize,
    pub success: Option<bool>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    #[serde(rename = "return")]
    pub ret: Stat,
    pub normalized_score: Stat,
    pub mean_step_cost: Stat,
    pub length: Stat,
    pub success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutMetrics {
    pub episodes: Vec<EpisodeMetrics>,
}

impl RolloutMetrics {
    pub fn summary(&self) -> Summary {
        let col = |f: fn(&EpisodeMetrics) -> f64| Stat::of(&self.episodes.iter().map(f).collect::<Vec<_>>());
        let flags: Vec<bool> = self.episodes.iter().filter_map(|e| e.success).collect();
        Summary {
            episodes: self.episodes.len(),
            ret: col(|e| e.ret),
            normalized_score: col(|e| e.normalized_score),
            mean_step_cost: col(|e| e.mean_step_cost),
            length: col(|e| e.length as f64),
            success_rate: (!flags.is_empty())
                .then(|| flags.iter().filter(|&&s| s).count() as f64 / flags.len() as f64),
        }
    }
}

/// Per-feature, per-timestep acquisition frequency over the episodes still
/// running at that timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub features: Vec<String>,
    /// `m × T_max`.
    pub freq: Vec<Vec<f64>>,
    /// Episodes still running at each timestep.
    pub alive: Vec<usize>,
}

impl Heatmap {
    pub fn from_traces(features: &[String], traces: &[EpisodeTrace]) -> Heatmap {
        let m = features.len();
        let t_max = traces.iter().map(|e| e.masks.len()).max().unwrap_or(0);
        let mut counts = vec![vec![0usize; t_max]; m];
        let mut alive = vec![0usize; t_max];
        for e in traces {
            for (t, q) in e.masks.iter().enumerate() {
                alive[t] += 1;
                for (i, row) in counts.iter_mut().enumerate() {
                    row[t] += usize::from(q.get(i));
                }
            }
        }
        let freq = counts
            .iter()
            .map(|row| row.iter().zip(&alive).map(|(&c, &a)| c as f64 / a as f64).collect())
            .collect();
        Heatmap {
            features: features.to_vec(),
            freq,
            alive,
        }
    }

    pub fn t_max(&self) -> usize {
        self.alive.len()
    }
}

/// Result of [`rollout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub metrics: RolloutMetrics,
    pub heatmap: Heatmap,
    pub traces: Vec<EpisodeTrace>,
}

/// Environment seed of evaluation episode `i`.
pub fn eval_episode_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &[tag::EVAL, i as u64, 0])
}

/// Runs one evaluation episode on the held-out pool.
pub fn run_episode(policy: &Policy, cfg: &RolloutConfig, i: usize) -> Result<EpisodeTrace> {
    let mut env = make_env(&policy.cfg.env)?;
    policy.check_env(env.spec())?;
    let spec = &policy.cfg.features;
    env.set_eval_pool(true);
    env.reset_state(eval_episode_seed(cfg.seed, i));
    let mut r = rng::stream(cfg.seed, &[tag::EVAL, i as u64, 1]);
    let mut agent = Agent::new(policy);
    let mut target = cfg.target_rtg;
    let mut trace = EpisodeTrace {
        masks: Vec::new(),
        rewards: Vec::new(),
        targets: Vec::new(),
        success: None,
    };
    loop {
        let how = match cfg.acquisition {
            AcquisitionMode::Policy => Acquire::Policy(&mut r),
            AcquisitionMode::Random(p) => Acquire::Random { p, rng: &mut r },
            AcquisitionMode::Full => Acquire::Fixed(QueryMask::ones(spec.m())),
            AcquisitionMode::NoInfo => Acquire::Fixed(with_free_features(QueryMask::zeros(spec.m()), spec)),
        };
        let mask = agent.acquire(how)?;
        let obs = env.observe(&mask);
        let action = agent.act(&obs, target)?;
        let tr = env.advance(&action)?;
        trace.masks.push(mask);
        trace.rewards.push(tr.reward);
        trace.targets.push(target);
        target -= tr.reward;
        if tr.done {
            break;
        }
    }
    trace.success = env.success();
    Ok(trace)
}

/// Evaluates `policy` over `cfg.episodes` held-out episodes.
pub fn rollout(policy: &Policy, reference: &ReferenceScores, cfg: &RolloutConfig) -> Result<Rollout> {
    cfg.validate()?;
    let env = make_env(&policy.cfg.env)?;
    policy.check_env(env.spec())?;
    let traces = cfg
        .execution
        .map_indices(cfg.episodes, |i| run_episode(policy, cfg, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let spec = &policy.cfg.features;
    let mut episodes = Vec::with_capacity(traces.len());
    for (i, e) in traces.iter().enumerate() {
        let ret: f64 = e.rewards.iter().sum();
        let costs: Vec<f64> = e.masks.iter().map(|q| query_cost(q, spec)).collect::<Result<_>>()?;
        episodes.push(EpisodeMetrics {
            episode: i,
            ret,
            normalized_score: normalized_score(ret, reference.random, reference.expert)?,
            mean_step_cost: costs.iter().sum::<f64>() / costs.len() as f64,
            length: e.masks.len(),
            success: e.success,
        });
    }
    Ok(Rollout {
        metrics: RolloutMetrics { episodes },
        heatmap: Heatmap::from_traces(spec.names(), &traces),
        traces,
    })
}

#[cfg(test)]
mod tests;
