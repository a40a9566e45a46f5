//! Noisy feature copies at three price tiers.

use rand_distr::{Distribution, StandardNormal};

use super::{Env, EnvSpec, Transition};
use crate::budget::{FeatureSpec, MaskedObservation, QueryMask};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    /// Exact copy.
    None,
    Low,
    High,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::None, Tier::Low, Tier::High];

    pub fn cost(self) -> f64 {
        match self {
            Tier::None => 20.0,
            Tier::Low => 5.0,
            Tier::High => 1.0,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Tier::None => "n",
            Tier::Low => "l",
            Tier::High => "h",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyConfig {
    pub tiers: Vec<Tier>,
    /// Noise standard deviation of the low tier, in units of each value's scale.
    pub sigma_low: f64,
    pub sigma_high: f64,
}

impl Default for NoisyConfig {
    fn default() -> Self {
        NoisyConfig {
            tiers: Tier::ALL.to_vec(),
            sigma_low: 0.1,
            sigma_high: 1.0,
        }
    }
}

/// Replaces each base feature by one copy per tier. Tier `k` of feature `i`
/// is feature `k·m + i`. Noise for every value is drawn once per step from
/// the episode seed, whatever the mask.
pub struct NoisyEnv {
    base: Box<dyn Env>,
    cfg: NoisyConfig,
    spec: EnvSpec,
    rng: Rng,
    /// Per tier, per base value.
    noise: Vec<Vec<f64>>,
}

impl NoisyEnv {
    pub fn new(base: Box<dyn Env>, cfg: NoisyConfig, id: &str) -> Result<Self> {
        if cfg.tiers.is_empty() {
            return Err(Error::Env("noisy wrapper needs at least one tier".into()));
        }
        let b = base.spec();
        let bf = &b.features;
        let mut names = Vec::new();
        let mut costs = Vec::new();
        let mut widths = Vec::new();
        let mut scales = Vec::new();
        for t in &cfg.tiers {
            for i in 0..bf.m() {
                names.push(format!("{}@{}", bf.names()[i], t.suffix()));
                costs.push(t.cost());
                widths.push(bf.widths()[i]);
            }
            scales.extend_from_slice(&b.value_scales);
        }
        let spec = EnvSpec {
            id: id.to_string(),
            features: FeatureSpec::new(names, costs, widths)?,
            value_scales: scales,
            ..b.clone()
        };
        let n = b.obs_dim();
        let tiers = cfg.tiers.len();
        let mut env = NoisyEnv {
            base,
            cfg,
            spec,
            rng: rng::stream(0, &[]),
            noise: vec![vec![0.0; n]; tiers],
        };
        env.reset_state(0);
        Ok(env)
    }

    fn sigma(&self, t: Tier) -> f64 {
        match t {
            Tier::None => 0.0,
            Tier::Low => self.cfg.sigma_low,
            Tier::High => self.cfg.sigma_high,
        }
    }

    fn draw_noise(&mut self) {
        let scales = &self.base.spec().value_scales;
        for (k, &t) in self.cfg.tiers.iter().enumerate() {
            let s = self.sigma(t);
            for (j, n) in self.noise[k].iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *n = s * scales[j] * z;
            }
        }
    }
}

impl Env for NoisyEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset_state(&mut self, seed: u64) {
        self.base.reset_state(seed);
        self.rng = rng::stream(seed, &[rng::tag::NOISE]);
        self.draw_noise();
    }

    fn observe(&mut self, mask: &QueryMask) -> MaskedObservation {
        let m = self.base.spec().m();
        let base_mask = QueryMask::new((0..m).map(|i| (0..self.cfg.tiers.len()).any(|k| mask.get(k * m + i))).collect());
        let full = self.base.observe(&base_mask).values;
        let bf = &self.base.spec().features;
        let offsets = bf.offsets();
        let n = full.len();
        let mut values = vec![0.0; n * self.cfg.tiers.len()];
        for k in 0..self.cfg.tiers.len() {
            for i in 0..m {
                if mask.get(k * m + i) {
                    for j in offsets[i]..offsets[i] + bf.widths()[i] {
                        values[k * n + j] = full[j] + self.noise[k][j];
                    }
                }
            }
        }
        MaskedObservation {
            values,
            mask: mask.clone(),
        }
    }

    fn advance(&mut self, action: &[f64]) -> Result<Transition> {
        let tr = self.base.advance(action)?;
        self.draw_noise();
        Ok(tr)
    }

    fn expert_action(&self) -> Vec<f64> {
        self.base.expert_action()
    }

    fn is_done(&self) -> bool {
        self.base.is_done()
    }

    fn t(&self) -> usize {
        self.base.t()
    }

    fn success(&self) -> Option<bool> {
        self.base.success()
    }

    fn set_eval_pool(&mut self, eval: bool) {
        self.base.set_eval_pool(eval);
    }

    fn ray_traces(&self) -> u64 {
        self.base.ray_traces()
    }

    fn boxed_clone(&self) -> Box<dyn Env> {
        Box::new(NoisyEnv {
            base: self.base.boxed_clone(),
            cfg: self.cfg.clone(),
            spec: self.spec.clone(),
            rng: self.rng.clone(),
            noise: self.noise.clone(),
        })
    }
}
