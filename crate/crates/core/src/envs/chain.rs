//! One-dimensional velocity control.
//!
//! `v' = decay·v + gain·a + w` with `w ~ N(0, noise·|v|)`; reward
//! `v' - λ·a²`. Exceeding `v_max` in either direction ends the episode with
//! the velocity clamped at the bound.

use rand_distr::{Distribution, Normal};

use super::{Env, EnvSpec, Transition};
use crate::budget::{FeatureSpec, MaskedObservation, QueryMask};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

use rand::Rng as _;

/// Derived features, in the order they are added.
pub const DERIVED: [&str; 6] = [
    "velocity_lag1",
    "velocity_lag2",
    "velocity_sq",
    "acceleration",
    "velocity_lag3",
    "velocity_lag4",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainConfig {
    /// Number of derived features beyond position and velocity.
    pub derived: usize,
    pub v_max: f64,
    pub lambda: f64,
    pub horizon: usize,
    pub decay: f64,
    pub gain: f64,
    pub noise: f64,
    /// Cruising speed of the expert.
    pub target_speed: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            derived: 4,
            v_max: 1.0,
            lambda: 0.1,
            horizon: 60,
            decay: 0.95,
            gain: 0.25,
            noise: 0.05,
            target_speed: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainRunner {
    cfg: ChainConfig,
    spec: EnvSpec,
    x: f64,
    v: f64,
    /// Past velocities, most recent first.
    lags: [f64; 4],
    t: usize,
    done: bool,
    rng: Rng,
}

impl ChainRunner {
    pub fn new(cfg: ChainConfig) -> Result<Self> {
        if cfg.derived > DERIVED.len() {
            return Err(Error::Config(format!(
                "chainrunner supports at most {} derived features",
                DERIVED.len()
            )));
        }
        let mut names = vec!["position", "velocity"];
        names.extend_from_slice(&DERIVED[..cfg.derived]);
        let features = FeatureSpec::uniform(&names, 1.0)?;
        let id = if cfg.derived == 0 { "chainrunner-min" } else { "chainrunner" };
        let spec = EnvSpec {
            id: id.into(),
            state_dim: 6,
            action_dim: 1,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            value_scales: vec![0.1; features.obs_dim()],
            features,
            horizon: cfg.horizon,
            termination: format!("|velocity| exceeds {} or {} steps", cfg.v_max, cfg.horizon),
            return_scale: 50.0,
        };
        let mut env = ChainRunner {
            cfg,
            spec,
            x: 0.0,
            v: 0.0,
            lags: [0.0; 4],
            t: 0,
            done: true,
            rng: rng::stream(0, &[]),
        };
        env.reset_state(0);
        Ok(env)
    }

    pub fn velocity(&self) -> f64 {
        self.v
    }

    /// Places the runner at rest (for tests of the dynamics).
    pub fn set_velocity(&mut self, v: f64) {
        self.v = v;
        self.lags = [v; 4];
    }

    fn feature_value(&self, i: usize) -> f64 {
        match i {
            0 => self.x / (self.cfg.v_max * self.cfg.horizon as f64),
            1 => self.v,
            _ => match DERIVED[i - 2] {
                "velocity_lag1" => self.lags[0],
                "velocity_lag2" => self.lags[1],
                "velocity_sq" => self.v * self.v,
                "acceleration" => self.v - self.lags[0],
                "velocity_lag3" => self.lags[2],
                _ => self.lags[3],
            },
        }
    }
}

impl Env for ChainRunner {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset_state(&mut self, seed: u64) {
        self.rng = rng::stream(seed, &[rng::tag::EPISODE]);
        self.x = 0.0;
        let v0 = self.rng.random_range(-0.1..0.1);
        self.set_velocity(v0);
        self.t = 0;
        self.done = false;
    }

    fn observe(&mut self, mask: &QueryMask) -> MaskedObservation {
        let values = (0..self.spec.m())
            .map(|i| if mask.get(i) { self.feature_value(i) } else { 0.0 })
            .collect();
        MaskedObservation {
            values,
            mask: mask.clone(),
        }
    }

    fn advance(&mut self, action: &[f64]) -> Result<Transition> {
        if self.done {
            return Err(Error::Env(format!("{}: step after the episode ended", self.spec.id)));
        }
        if action.len() != 1 {
            return Err(Error::Env(format!("{}: action of length {}, expected 1", self.spec.id, action.len())));
        }
        let a = self.spec.clip_action(action)[0];
        let sd = self.cfg.noise * self.v.abs();
        let w = if sd > 0.0 {
            Normal::new(0.0, sd).expect("finite sd").sample(&mut self.rng)
        } else {
            0.0
        };
        let mut v = self.cfg.decay * self.v + self.cfg.gain * a + w;
        let fell = v.abs() > self.cfg.v_max;
        if fell {
            v = v.clamp(-self.cfg.v_max, self.cfg.v_max);
        }
        self.lags = [self.v, self.lags[0], self.lags[1], self.lags[2]];
        self.v = v;
        self.x += v;
        self.t += 1;
        self.done = fell || self.t >= self.cfg.horizon;
        Ok(Transition {
            reward: v - self.cfg.lambda * a * a,
            done: self.done,
        })
    }

    fn expert_action(&self) -> Vec<f64> {
        let a = (self.cfg.target_speed - self.cfg.decay * self.v) / self.cfg.gain;
        vec![a.clamp(-1.0, 1.0)]
    }

    fn is_done(&self) -> bool {
        self.done
    }

    fn t(&self) -> usize {
        self.t
    }

    fn boxed_clone(&self) -> Box<dyn Env> {
        Box::new(self.clone())
    }
}
