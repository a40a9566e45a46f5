//! Desk-scale environments with per-feature acquisition costs.
//!
//! Environment ids:
//!
//! * `gridnav` – navigation on the default map with raycast sensors.
//! * `gridnav-keyed` – a corridor map where one of two hazard cells is lava,
//!   visible only to long sideways raycasts from the start.
//! * `chainrunner` – 1-D velocity control with redundant lagged features.
//! * `chainrunner-min` – the same dynamics with only position and velocity.
//!
//! Any id may carry a noisy-copy suffix, `+noisy` (all three tiers) or
//! `+noisy:TIERS` with `TIERS` a subset of `NLH`, e.g. `chainrunner-min+noisy:N`.

mod chain;
mod gridnav;
mod noisy;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{FeatureSpec, MaskedObservation, QueryMask};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{self, Rng};

pub use chain::{ChainConfig, ChainRunner};
pub use gridnav::{Cell, GridMap, GridNav, GridNavConfig, RAY_COSTS, RAY_DIRS, RAY_RANGES};
pub use noisy::{NoisyConfig, NoisyEnv, Tier};

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: String,
    /// Size of the internal simulator state.
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub features: FeatureSpec,
    pub horizon: usize,
    pub termination: String,
    /// Typical spread of each observation value; scales added noise.
    pub value_scales: Vec<f64>,
    /// Divides returns before they are fed to a policy as reward-to-go.
    pub return_scale: f64,
}

impl EnvSpec {
    pub fn obs_dim(&self) -> usize {
        self.features.obs_dim()
    }

    pub fn m(&self) -> usize {
        self.features.m()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&x, (&lo, &hi))| if x.is_nan() { 0.0 } else { x.clamp(lo, hi) })
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reward and termination of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub done: bool,
}

/// Full observation after a transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Env: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Deterministic initial state for `seed`.
    fn reset_state(&mut self, seed: u64);

    /// Computes only the acquired features of the current state.
    fn observe(&mut self, mask: &QueryMask) -> MaskedObservation;

    /// Applies an action (clipped to bounds). Errors once the episode is over.
    fn advance(&mut self, action: &[f64]) -> Result<Transition>;

    /// Near-optimal action from the full simulator state.
    fn expert_action(&self) -> Vec<f64>;

    fn is_done(&self) -> bool;

    /// Steps taken since reset.
    fn t(&self) -> usize;

    /// Whether the episode reached its goal; `None` where that is undefined.
    fn success(&self) -> Option<bool> {
        None
    }

    /// Switches between the training and held-out evaluation start pools.
    fn set_eval_pool(&mut self, _eval: bool) {}

    /// Raycasts physically traced since construction.
    fn ray_traces(&self) -> u64 {
        0
    }

    fn boxed_clone(&self) -> Box<dyn Env>;

    /// Resets and returns the full observation.
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.reset_state(seed);
        let m = self.spec().m();
        self.observe(&QueryMask::ones(m)).values
    }

    /// Steps and returns the full next observation.
    fn step(&mut self, action: &[f64]) -> Result<Step> {
        let tr = self.advance(action)?;
        let m = self.spec().m();
        Ok(Step {
            obs: self.observe(&QueryMask::ones(m)).values,
            reward: tr.reward,
            done: tr.done,
        })
    }
}

/// Builds an environment from its id.
pub fn make_env(id: &str) -> Result<Box<dyn Env>> {
    let (base, noisy) = match id.split_once('+') {
        Some((b, n)) => (b, Some(n)),
        None => (id, None),
    };
    let env: Box<dyn Env> = match base {
        "gridnav" => Box::new(GridNav::new(GridNavConfig::default_map())?),
        "gridnav-keyed" => Box::new(GridNav::new(GridNavConfig::keyed_map())?),
        "chainrunner" => Box::new(ChainRunner::new(ChainConfig::default())?),
        "chainrunner-min" => Box::new(ChainRunner::new(ChainConfig { derived: 0, ..ChainConfig::default() })?),
        other => return Err(Error::Env(format!("unknown environment {other:?}"))),
    };
    match noisy {
        None => Ok(env),
        Some(s) => {
            let tiers = match s.strip_prefix("noisy") {
                Some("") => Tier::ALL.to_vec(),
                Some(rest) => {
                    let letters = rest
                        .strip_prefix(':')
                        .ok_or_else(|| Error::Env(format!("bad noisy suffix in {id:?}")))?;
                    letters
                        .chars()
                        .map(|c| match c {
                            'N' => Ok(Tier::None),
                            'L' => Ok(Tier::Low),
                            'H' => Ok(Tier::High),
                            _ => Err(Error::Env(format!("unknown noise tier {c:?} in {id:?}"))),
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                None => return Err(Error::Env(format!("unknown wrapper in {id:?}"))),
            };
            Ok(Box::new(NoisyEnv::new(env, NoisyConfig { tiers, ..NoisyConfig::default() }, id)?))
        }
    }
}

/// Data-collection policy quality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Expert,
    Medium,
    Random,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Expert, Quality::Medium, Quality::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Expert => "expert",
            Quality::Medium => "medium",
            Quality::Random => "random",
        }
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Quality::Expert),
            "medium" => Ok(Quality::Medium),
            "random" => Ok(Quality::Random),
            _ => Err(Error::Config(format!("unknown quality {s:?} (expert, medium, random)"))),
        }
    }
}

/// Probability that the medium controller replaces the expert action with a
/// random one.
pub const MEDIUM_EPSILON: f64 = 0.4;

/// Scripted controller of the given quality.
pub fn scripted_action(env: &dyn Env, quality: Quality, r: &mut Rng) -> Vec<f64> {
    let spec = env.spec();
    let random = |r: &mut Rng| -> Vec<f64> {
        spec.action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(&lo, &hi)| r.random_range(lo..=hi))
            .collect()
    };
    match quality {
        Quality::Expert => env.expert_action(),
        Quality::Random => random(r),
        Quality::Medium => {
            if r.random::<f64>() < MEDIUM_EPSILON {
                random(r)
            } else {
                env.expert_action()
            }
        }
    }
}

/// Return and outcome of one scripted episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedEpisode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub success: Option<bool>,
}

impl ScriptedEpisode {
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs one episode of a scripted controller with full observations.
pub fn run_scripted(env: &mut dyn Env, quality: Quality, seed: u64) -> Result<ScriptedEpisode> {
    let mut r = rng::stream(seed, &[rng::tag::POLICY]);
    let mut obs = env.reset(seed);
    let mut ep = ScriptedEpisode {
        observations: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        success: None,
    };
    loop {
        let a = env.spec().clip_action(&scripted_action(env, quality, &mut r));
        let s = env.step(&a)?;
        ep.observations.push(std::mem::replace(&mut obs, s.obs));
        ep.actions.push(a);
        ep.rewards.push(s.reward);
        if s.done {
            break;
        }
    }
    ep.success = env.success();
    Ok(ep)
}

/// `S_random` and `S_expert` with the seeds they were measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScores {
    pub random: f64,
    pub expert: f64,
    pub episodes: usize,
    pub seed: u64,
}

/// Seed of reference episode `i`.
pub fn reference_episode_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &[rng::tag::REFERENCE, i as u64])
}

/// Mean returns of the random and expert controllers over `episodes`
/// evaluation-pool episodes.
pub fn reference_scores(id: &str, episodes: usize, seed: u64, exec: Execution) -> Result<ReferenceScores> {
    let proto = make_env(id)?;
    let mean = |q: Quality| -> Result<f64> {
        let rets = exec.map_indices(episodes, |i| {
            let mut env = proto.boxed_clone();
            env.set_eval_pool(true);
            run_scripted(env.as_mut(), q, reference_episode_seed(seed, i)).map(|e| e.ret())
        });
        let mut s = 0.0;
        for r in rets {
            s += r?;
        }
        Ok(s / episodes.max(1) as f64)
    };
    let scores = ReferenceScores {
        random: mean(Quality::Random)?,
        expert: mean(Quality::Expert)?,
        episodes,
        seed,
    };
    if !(scores.expert > scores.random) {
        return Err(Error::Env(format!(
            "{id}: expert score {} does not exceed random score {}",
            scores.expert, scores.random
        )));
    }
    Ok(scores)
}
