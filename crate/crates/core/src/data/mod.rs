//! Recorded episodes, reward-to-go, score normalization, persistence and
//! context-window batching.

mod io;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{make_env, reference_scores, run_scripted, Quality, ReferenceScores};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::{self, Rng};

pub use io::{read_dataset, write_dataset, EPISODES_FILE, MANIFEST_FILE, SCHEMA_VERSION};

/// Episodes measured for the reference scores stored with a dataset.
pub const REFERENCE_EPISODES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub env: String,
    pub quality: Quality,
    pub seed: u64,
}

/// One trajectory with full, unmasked observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub rtg: Vec<f64>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn new(
        observations: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        rewards: Vec<f64>,
        meta: EpisodeMeta,
    ) -> Result<Self> {
        let t = rewards.len();
        if t == 0 {
            return Err(Error::Config("episode has no steps".into()));
        }
        if observations.len() != t || actions.len() != t {
            return Err(Error::Config(format!(
                "episode has {} observations, {} actions and {t} rewards",
                observations.len(),
                actions.len()
            )));
        }
        Ok(Episode {
            rtg: reward_to_go(&rewards),
            observations,
            actions,
            rewards,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Undiscounted suffix sums: `rtg_t = Σ_{t' ≥ t} r_t'`.
pub fn reward_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc += rewards[t];
        out[t] = acc;
    }
    out
}

/// `100 (S - S_random) / (S_expert - S_random)`.
pub fn normalized_score(s: f64, s_random: f64, s_expert: f64) -> Result<f64> {
    let span = s_expert - s_random;
    if span == 0.0 || !span.is_finite() {
        return Err(Error::Numeric(format!(
            "degenerate reference scores: random {s_random}, expert {s_expert}"
        )));
    }
    Ok(100.0 * (s - s_random) / span)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub env: String,
    pub env_spec_hash: String,
    pub episodes: usize,
    pub quality_mix: BTreeMap<String, usize>,
    pub reference: ReferenceScores,
    pub creation_seed: u64,
    pub episodes_file: String,
    pub episodes_sha256: String,
}

impl DatasetManifest {
    pub fn s_random(&self) -> f64 {
        self.reference.random
    }

    pub fn s_expert(&self) -> f64 {
        self.reference.expert
    }

    pub fn normalize(&self, s: f64) -> Result<f64> {
        normalized_score(s, self.s_random(), self.s_expert())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Mean return of the episodes recorded with the given quality.
    pub fn mean_return(&self, quality: Option<Quality>) -> Option<f64> {
        let rets: Vec<f64> = self
            .episodes
            .iter()
            .filter(|e| quality.is_none_or(|q| e.meta.quality == q))
            .map(Episode::ret)
            .collect();
        if rets.is_empty() {
            None
        } else {
            Some(rets.iter().sum::<f64>() / rets.len() as f64)
        }
    }
}

/// Seed of generated episode `i`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &[rng::tag::EPISODE, i as u64])
}

/// Records `n` scripted episodes on the training pool, plus reference scores.
pub fn generate_dataset(env_id: &str, quality: Quality, n: usize, seed: u64, exec: Execution) -> Result<Dataset> {
    let proto = make_env(env_id)?;
    let results = exec.map_indices(n, |i| {
        let mut env = proto.boxed_clone();
        let s = episode_seed(seed, i);
        let ep = run_scripted(env.as_mut(), quality, s)?;
        Episode::new(
            ep.observations,
            ep.actions,
            ep.rewards,
            EpisodeMeta {
                env: env_id.to_string(),
                quality,
                seed: s,
            },
        )
    });
    let episodes = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reference = reference_scores(env_id, REFERENCE_EPISODES, seed, exec)?;
    let mut quality_mix = BTreeMap::new();
    if n > 0 {
        quality_mix.insert(quality.to_string(), n);
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION,
            env: env_id.to_string(),
            env_spec_hash: proto.spec().hash(),
            episodes: n,
            quality_mix,
            reference,
            creation_seed: seed,
            episodes_file: EPISODES_FILE.to_string(),
            episodes_sha256: String::new(),
        },
        episodes,
    })
}

/// A context window cut from one episode, front-padded to length `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub episode: usize,
    /// Index in the episode of the first real step.
    pub start: usize,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rtg: Vec<f64>,
    /// Timestep within the episode of every position (0 for padding).
    pub timesteps: Vec<usize>,
    /// False at padding positions, which carry no loss.
    pub valid: Vec<bool>,
}

impl Slice {
    pub fn pad(&self) -> usize {
        self.valid.iter().take_while(|v| !**v).count()
    }

    pub fn len_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Real steps, without padding: `(observation, action, rtg, timestep)`.
    pub fn steps(&self) -> impl Iterator<Item = (&[f64], &[f64], f64, usize)> {
        let p = self.pad();
        (p..self.valid.len()).map(move |i| {
            (
                self.observations[i].as_slice(),
                self.actions[i].as_slice(),
                self.rtg[i],
                self.timesteps[i],
            )
        })
    }
}

/// Cuts `[start, start + K)` (clamped to the episode) and front-pads it.
pub fn make_slice(ep: &Episode, episode: usize, start: usize, k: usize) -> Slice {
    let end = (start + k).min(ep.len());
    let n = end - start;
    let pad = k - n;
    let obs_dim = ep.observations[0].len();
    let act_dim = ep.actions[0].len();
    let mut s = Slice {
        episode,
        start,
        observations: vec![vec![0.0; obs_dim]; pad],
        actions: vec![vec![0.0; act_dim]; pad],
        rtg: vec![0.0; pad],
        timesteps: vec![0; pad],
        valid: vec![false; pad],
    };
    for t in start..end {
        s.observations.push(ep.observations[t].clone());
        s.actions.push(ep.actions[t].clone());
        s.rtg.push(ep.rtg[t]);
        s.timesteps.push(t);
        s.valid.push(true);
    }
    s
}

/// Draws one slice: a uniform episode, then a uniform start in
/// `[0, max(T - K, 0)]`, so windows are full whenever the episode allows.
pub fn sample_slice(episodes: &[Episode], k: usize, r: &mut Rng) -> Slice {
    let e = r.random_range(0..episodes.len());
    let ep = &episodes[e];
    let last = ep.len().saturating_sub(k);
    let start = r.random_range(0..=last);
    make_slice(ep, e, start, k)
}

pub fn sample_batch(dataset: &Dataset, batch_size: usize, k: usize, r: &mut Rng) -> Result<Vec<Slice>> {
    if dataset.episodes.is_empty() {
        return Err(Error::Config("cannot sample from an empty dataset".into()));
    }
    if k == 0 {
        return Err(Error::Config("context length must be at least 1".into()));
    }
    Ok((0..batch_size).map(|_| sample_slice(&dataset.episodes, k, r)).collect())
}

#[cfg(test)]
mod tests;
