use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; `0` disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings for the MLP policies.
    pub fn mlp() -> Self {
        AdamConfig {
            grad_clip: 2.0,
            ..AdamConfig::transformer()
        }
    }

    /// Settings for the transformer policies.
    pub fn transformer() -> Self {
        AdamConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Multiplier applied by clipping (1 when not clipped).
    pub clip_scale: f64,
}

/// Multiplier bringing a gradient of norm `norm` within `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Clips `grads` in place, then updates every parameter in `params`.
    /// Parameters without a gradient entry see a zero gradient (they still
    /// decay).
    pub fn step(&mut self, params: &mut ParamStore, grads: &mut Grads) -> Result<StepStats> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {name} at optimizer step {}",
                self.step + 1
            )));
        }
        let grad_norm = grads.global_norm();
        let s = clip_scale(grad_norm, self.cfg.grad_clip);
        if s != 1.0 {
            grads.scale(s);
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.map.get(name);
            let data = p.data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] *= 1.0 - c.lr * c.weight_decay;
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            clip_scale: s,
        })
    }
}
