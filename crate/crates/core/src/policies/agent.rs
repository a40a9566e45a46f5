//! Step-by-step inference with a frozen policy.

use std::collections::VecDeque;

use rand::Rng as _;

use super::{memoryless, sample_bits, transformer, with_free_features, Policy};
use crate::autodiff::{Tensor, Var};
use crate::budget::{MaskedObservation, QueryMask};
use crate::error::{Error, Result};
use crate::nn::Fwd;
use crate::rng::Rng;

/// How the mask of the next step is chosen.
pub enum Acquire<'r> {
    /// Draw from the policy's acquisition probabilities.
    Policy(&'r mut Rng),
    /// Each bit Bernoulli(p), free features on.
    Random { p: f64, rng: &'r mut Rng },
    /// A given mask.
    Fixed(QueryMask),
}

struct Past {
    enc: Vec<f64>,
    action: Vec<f64>,
    rtg: f64,
    t: usize,
}

/// Holds the trailing context of one episode.
pub struct Agent<'a> {
    policy: &'a Policy,
    history: VecDeque<Past>,
    t: usize,
}

impl<'a> Agent<'a> {
    pub fn new(policy: &'a Policy) -> Self {
        Agent {
            policy,
            history: VecDeque::new(),
            t: 0,
        }
    }

    /// Steps acted so far.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Start token plus the retained history as `(rtg, obs, act)` tokens.
    fn context(&self, f: &mut Fwd) -> Result<Vec<Var>> {
        let cfg = &self.policy.cfg;
        let h = transformer::heads(cfg);
        let mut toks = vec![f.p(transformer::START)?];
        for p in &self.history {
            toks.push(transformer::rtg_token(f, &h, cfg, p.rtg, p.t)?);
            toks.push(transformer::obs_token_const(f, &h, p.enc.clone(), p.t)?);
            toks.push(transformer::act_token(f, &h, &p.action, p.t)?);
        }
        Ok(toks)
    }

    /// Acquisition probabilities for the next step; `None` in `dt` mode.
    pub fn probabilities(&self) -> Result<Option<Vec<f64>>> {
        let cfg = &self.policy.cfg;
        if !cfg.mode.has_acquisition() {
            return Ok(None);
        }
        if !cfg.mode.is_transformer() {
            return Ok(self.policy.static_probabilities());
        }
        let mut f = Fwd::eval(&self.policy.params);
        let toks = self.context(&mut f)?;
        let x = f.g.concat_rows(&toks)?;
        let out = transformer::trunk(cfg).forward(&mut f, x)?;
        let row = f.g.slice_rows(out, toks.len() - 1, 1)?;
        let p = transformer::acquisition_probs(&mut f, &transformer::heads(cfg), row)?;
        Ok(Some(f.g.value(p).data().to_vec()))
    }

    /// Chooses the mask of the next step.
    pub fn acquire(&self, how: Acquire) -> Result<QueryMask> {
        let spec = &self.policy.cfg.features;
        let m = spec.m();
        match how {
            Acquire::Fixed(mask) => {
                if mask.len() != m {
                    return Err(Error::Policy(format!("mask of length {} for {m} features", mask.len())));
                }
                Ok(mask)
            }
            Acquire::Random { p, rng } => {
                let bits = (0..m).map(|_| rng.random::<f64>() < p).collect();
                Ok(with_free_features(QueryMask::new(bits), spec))
            }
            Acquire::Policy(rng) => match self.probabilities()? {
                None => Ok(QueryMask::ones(m)),
                Some(probs) => {
                    Ok(with_free_features(QueryMask::new(sample_bits(&probs, rng)), spec))
                }
            },
        }
    }

    /// Predicts the action for the current masked observation and appends
    /// the step to the context.
    pub fn act(&mut self, obs: &MaskedObservation, rtg: f64) -> Result<Vec<f64>> {
        let cfg = &self.policy.cfg;
        if obs.values.len() != cfg.obs_dim() || obs.mask.len() != cfg.m() {
            return Err(Error::Policy(format!(
                "observation of width {} with {} mask bits, expected {} and {}",
                obs.values.len(),
                obs.mask.len(),
                cfg.obs_dim(),
                cfg.m()
            )));
        }
        let t = self.t.min(cfg.horizon - 1);
        let enc = obs.encode();
        let mut f = Fwd::eval(&self.policy.params);
        let a = if cfg.mode.is_transformer() {
            let h = transformer::heads(cfg);
            let mut toks = self.context(&mut f)?;
            toks.push(transformer::rtg_token(&mut f, &h, cfg, rtg, t)?);
            toks.push(transformer::obs_token_const(&mut f, &h, enc.clone(), t)?);
            let x = f.g.concat_rows(&toks)?;
            let out = transformer::trunk(cfg).forward(&mut f, x)?;
            let row = f.g.slice_rows(out, toks.len() - 1, 1)?;
            transformer::action_out(&mut f, &h, row)?
        } else {
            let x = f.g.constant(Tensor::row(enc.clone()));
            memoryless::act(&mut f, cfg, &memoryless::mlp(cfg), x, rtg)?
        };
        let action = f.g.value(a).data().to_vec();
        if cfg.mode.is_transformer() {
            self.history.push_back(Past {
                enc,
                action: action.clone(),
                rtg,
                t,
            });
            while self.history.len() >= cfg.context_length() {
                self.history.pop_front();
            }
        }
        self.t += 1;
        Ok(action)
    }
}
