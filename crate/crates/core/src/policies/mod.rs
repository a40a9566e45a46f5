//! Budgeted policies: the transformer family (`bdt`, `dt`) and the
//! memory-less MLP family (`rcbc`, `bc`).
//!
//! Every policy pairs an acquisition part, which emits per-feature
//! probabilities `q̃_t`, with an action part that reads `[q⊙o, q]`. The `dt`
//! mode has no acquisition part and always sees every feature.

mod agent;
mod memoryless;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::budget::{graph_penalty, graph_step_cost, penalty, query_cost, FeatureSpec, QueryMask};
use crate::data::Slice;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Fwd, MlpConfig, ParamStore, TransformerConfig};
use crate::rng::Rng;

pub use agent::{Acquire, Agent};

/// Initial bias of the acquisition logits, so fresh policies acquire most
/// features.
pub const ACQUISITION_INIT_LOGIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Bdt,
    Dt,
    Rcbc,
    Bc,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Bdt, Mode::Dt, Mode::Rcbc, Mode::Bc];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bdt => "bdt",
            Mode::Dt => "dt",
            Mode::Rcbc => "rcbc",
            Mode::Bc => "bc",
        }
    }

    pub fn has_acquisition(self) -> bool {
        self != Mode::Dt
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Mode::Bdt | Mode::Dt)
    }

    /// Whether the policy is conditioned on reward-to-go.
    pub fn uses_rtg(self) -> bool {
        self != Mode::Bc
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (bdt, dt, rcbc, bc)")))
    }
}

/// Everything needed to rebuild a policy from its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub mode: Mode,
    pub env: String,
    pub features: FeatureSpec,
    pub action_dim: usize,
    /// Longest episode; sizes the timestep embedding.
    pub horizon: usize,
    /// Reward-to-go is divided by this before it enters the network.
    pub return_scale: f64,
    pub transformer: TransformerConfig,
    pub mlp: MlpConfig,
}

impl PolicyConfig {
    pub fn for_env(mode: Mode, spec: &EnvSpec) -> Self {
        PolicyConfig {
            mode,
            env: spec.id.clone(),
            features: spec.features.clone(),
            action_dim: spec.action_dim,
            horizon: spec.horizon,
            return_scale: spec.return_scale,
            transformer: TransformerConfig::default(),
            mlp: MlpConfig::default(),
        }
    }

    pub fn m(&self) -> usize {
        self.features.m()
    }

    pub fn obs_dim(&self) -> usize {
        self.features.obs_dim()
    }

    /// Width of `[q⊙o, q]`.
    pub fn encoded_dim(&self) -> usize {
        self.obs_dim() + self.m()
    }

    /// Timesteps seen per prediction: `K` for transformers, 1 otherwise.
    pub fn context_length(&self) -> usize {
        if self.mode.is_transformer() {
            self.transformer.context_length
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_dim == 0 || self.horizon == 0 {
            return Err(Error::Config("action_dim and horizon must be positive".into()));
        }
        if !(self.return_scale > 0.0) {
            return Err(Error::Config(format!("return_scale {} must be positive", self.return_scale)));
        }
        if self.mode.is_transformer() {
            self.transformer.validate()
        } else {
            if self.mlp.n_layers == 0 || self.mlp.hidden == 0 {
                return Err(Error::Config("mlp needs at least one hidden layer".into()));
            }
            if !(0.0..1.0).contains(&self.mlp.dropout) {
                return Err(Error::Config(format!("mlp dropout {} not in [0, 1)", self.mlp.dropout)));
            }
            Ok(())
        }
    }
}

/// Where the query masks of a forward pass come from.
pub enum MaskSource<'a> {
    /// Bernoulli draws from the acquisition probabilities, with the
    /// straight-through estimator on the gradient path.
    Sample(&'a mut Rng),
    /// Fixed masks as constants; the acquisition part is not evaluated.
    Forced(&'a [QueryMask]),
    /// Each bit Bernoulli(p) regardless of context; constants.
    Random { p: f64, rng: &'a mut Rng },
    /// Given draws passed through the straight-through estimator.
    Replay(&'a [QueryMask]),
    /// `q = q̃ + s` with constant offsets `s`, one vector per step.
    Shift(&'a [Vec<f64>]),
}

impl MaskSource<'_> {
    fn evaluates_acquisition(&self) -> bool {
        matches!(self, MaskSource::Sample(_) | MaskSource::Replay(_) | MaskSource::Shift(_))
    }
}

/// One timestep fed to a policy. `obs` is the full observation; masking
/// happens inside the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub obs: &'a [f64],
    pub action: &'a [f64],
    pub rtg: f64,
    pub t: usize,
}

/// Outputs of one timestep.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Predicted action, `1 × action_dim`.
    pub action: Var,
    /// Acquisition probabilities `1 × m`, when they were evaluated.
    pub probs: Option<Var>,
    /// The mask used at this step.
    pub mask: QueryMask,
}

/// Independent Bernoulli draws, one per probability.
pub fn sample_bits(probs: &[f64], rng: &mut Rng) -> Vec<bool> {
    probs.iter().map(|&p| rng.random::<f64>() < p).collect()
}

/// Forces free features on.
pub fn with_free_features(mut mask: QueryMask, spec: &FeatureSpec) -> QueryMask {
    for i in spec.free_features() {
        mask.set(i, true);
    }
    mask
}

/// Shared per-pass constants: the cost column and the expansion matrix.
pub(crate) struct Encoder {
    expansion: Var,
    cost_column: Var,
}

impl Encoder {
    pub(crate) fn new(g: &mut Graph, spec: &FeatureSpec) -> Self {
        Encoder {
            expansion: g.constant(spec.expansion_matrix()),
            cost_column: g.constant(spec.normalized_cost_column()),
        }
    }

    /// `[o ⊙ expand(q), q]` on the graph, so gradients reach `q`.
    pub(crate) fn encode(&self, g: &mut Graph, obs: &[f64], q: Var) -> Result<Var> {
        let e = g.matmul(q, self.expansion)?;
        let o = g.constant(Tensor::row(obs.to_vec()));
        let v = g.mul(o, e)?;
        Ok(g.concat_cols(&[v, q])?)
    }

    pub(crate) fn step_cost(&self, g: &mut Graph, probs: Var) -> Result<Var> {
        graph_step_cost(g, probs, self.cost_column)
    }
}

/// Encodes a constant mask without a gradient path: values of unacquired
/// features are zeroed before they reach the graph.
pub(crate) fn encode_constant(obs: &[f64], mask: &QueryMask, spec: &FeatureSpec) -> Vec<f64> {
    crate::budget::MaskedObservation::new(obs, mask, spec).encode()
}

/// Resolves the mask variable of step `i` given the acquisition
/// probabilities (when evaluated). Returns the variable fed to the encoder,
/// or `None` for constant masks, plus the mask bits.
pub(crate) fn resolve_mask(
    g: &mut Graph,
    source: &mut MaskSource,
    probs: Option<Var>,
    i: usize,
    spec: &FeatureSpec,
) -> Result<(Option<Var>, QueryMask)> {
    let m = spec.m();
    let need = |what: &str| Error::Policy(format!("{what}: no mask for step {i}"));
    match source {
        MaskSource::Sample(rng) => {
            let p = probs.expect("acquisition evaluated");
            let bits = sample_bits(g.value(p).data(), rng);
            let mask = with_free_features(QueryMask::new(bits), spec);
            let q = g.straight_through(p, Tensor::row(mask.to_f64()))?;
            Ok((Some(q), mask))
        }
        MaskSource::Replay(masks) => {
            let mask = masks.get(i).ok_or_else(|| need("replay"))?.clone();
            check_len(&mask, m)?;
            let p = probs.expect("acquisition evaluated");
            let q = g.straight_through(p, Tensor::row(mask.to_f64()))?;
            Ok((Some(q), mask))
        }
        MaskSource::Shift(shifts) => {
            let s = shifts.get(i).ok_or_else(|| need("shift"))?;
            if s.len() != m {
                return Err(Error::Policy(format!("shift of length {} for {m} features", s.len())));
            }
            let p = probs.expect("acquisition evaluated");
            let c = g.constant(Tensor::row(s.clone()));
            let q = g.add(p, c)?;
            let mask = QueryMask::new(g.value(q).data().iter().map(|&x| x >= 0.5).collect());
            Ok((Some(q), mask))
        }
        MaskSource::Forced(masks) => {
            let mask = masks.get(i).ok_or_else(|| need("forced"))?.clone();
            check_len(&mask, m)?;
            Ok((None, mask))
        }
        MaskSource::Random { p, rng } => {
            let bits = (0..m).map(|_| rng.random::<f64>() < *p).collect();
            Ok((None, with_free_features(QueryMask::new(bits), spec)))
        }
    }
}

fn check_len(mask: &QueryMask, m: usize) -> Result<()> {
    if mask.len() != m {
        return Err(Error::Policy(format!("mask of length {} for {m} features", mask.len())));
    }
    Ok(())
}

/// A policy: its configuration and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: ParamStore,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        if cfg.mode.is_transformer() {
            transformer::init(&cfg, &mut params, seed);
        } else {
            memoryless::init(&cfg, &mut params, seed);
        }
        Ok(Policy { cfg, params })
    }

    pub fn checkpoint(&self) -> Checkpoint<PolicyConfig> {
        Checkpoint::new(self.cfg.clone(), &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint<PolicyConfig>) -> Result<Self> {
        ck.config.validate()?;
        let params = ck.params()?;
        let fresh = Policy::new(ck.config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "checkpoint parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("checkpoint lacks parameter {name}"))),
            }
        }
        Ok(Policy {
            cfg: ck.config.clone(),
            params,
        })
    }

    /// Checks that an environment matches the policy's feature layout.
    pub fn check_env(&self, spec: &EnvSpec) -> Result<()> {
        if spec.features != self.cfg.features || spec.action_dim != self.cfg.action_dim {
            return Err(Error::Policy(format!(
                "policy trained on {} does not match environment {}",
                self.cfg.env, spec.id
            )));
        }
        Ok(())
    }

    /// Runs the policy over consecutive timesteps, sampling or taking each
    /// step's mask before its observation is encoded.
    pub fn forward(&self, f: &mut Fwd, steps: &[StepInput], mut masks: MaskSource) -> Result<Vec<StepOutput>> {
        if steps.is_empty() {
            return Err(Error::Policy("forward over zero steps".into()));
        }
        if steps.len() > self.cfg.context_length() && self.cfg.mode.is_transformer() {
            return Err(Error::Policy(format!(
                "{} steps exceed the context length {}",
                steps.len(),
                self.cfg.context_length()
            )));
        }
        for s in steps {
            if s.obs.len() != self.cfg.obs_dim() || s.action.len() != self.cfg.action_dim {
                return Err(Error::Policy(format!(
                    "step with observation width {} and action width {}, expected {} and {}",
                    s.obs.len(),
                    s.action.len(),
                    self.cfg.obs_dim(),
                    self.cfg.action_dim
                )));
            }
            if s.t >= self.cfg.horizon {
                return Err(Error::Policy(format!("timestep {} beyond horizon {}", s.t, self.cfg.horizon)));
            }
        }
        if !self.cfg.mode.has_acquisition() && masks.evaluates_acquisition() {
            return Err(Error::Policy(format!("{} mode has no acquisition policy", self.cfg.mode)));
        }
        if self.cfg.mode.is_transformer() {
            transformer::forward(self, f, steps, &mut masks)
        } else {
            memoryless::forward(self, f, steps, &mut masks)
        }
    }

    /// Acquisition probabilities of the memory-less acquisition policy.
    pub fn static_probabilities(&self) -> Option<Vec<f64>> {
        memoryless::static_probabilities(self)
    }
}

/// Penalty settings for one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBudget {
    /// Normalized ceiling `C`.
    pub constraint: f64,
    pub window: usize,
    pub gamma: f64,
}

/// The loss node and its scalar parts.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub loss: Var,
    /// Mean squared action error.
    pub delta: f64,
    /// Penalty on the acquisition-probability costs.
    pub phi: f64,
    /// Mean cost of the masks actually used.
    pub mask_cost: f64,
    pub masks: Vec<QueryMask>,
}

/// `Δ + γ·φ` over the real steps of a slice.
pub fn sequence_loss(
    policy: &Policy,
    f: &mut Fwd,
    slice: &Slice,
    budget: LossBudget,
    masks: MaskSource,
) -> Result<LossParts> {
    let steps: Vec<StepInput> = slice
        .steps()
        .map(|(obs, action, rtg, t)| StepInput { obs, action, rtg, t })
        .collect();
    if steps.is_empty() {
        return Err(Error::Policy("slice has no real steps".into()));
    }
    let outs = policy.forward(f, &steps, masks)?;
    let spec = &policy.cfg.features;

    let mut sq = Vec::with_capacity(outs.len());
    for (o, s) in outs.iter().zip(&steps) {
        let target = f.g.constant(Tensor::row(s.action.to_vec()));
        let d = f.g.sub(o.action, target)?;
        sq.push(f.g.square(d));
    }
    let all = f.g.concat_cols(&sq)?;
    let delta = f.g.mean(all);

    let mask_costs: Vec<f64> = outs.iter().map(|o| query_cost(&o.mask, spec)).collect::<Result<_>>()?;
    let mask_cost = mask_costs.iter().sum::<f64>() / mask_costs.len() as f64;
    let masks: Vec<QueryMask> = outs.iter().map(|o| o.mask.clone()).collect();

    if !policy.cfg.mode.has_acquisition() {
        let delta_v = f.g.value(delta).item();
        return Ok(LossParts {
            loss: delta,
            delta: delta_v,
            phi: 0.0,
            mask_cost,
            masks,
        });
    }

    let (phi, phi_v) = if outs.iter().all(|o| o.probs.is_some()) {
        let enc = Encoder::new(&mut f.g, spec);
        let mut costs = Vec::with_capacity(outs.len());
        for o in &outs {
            costs.push(enc.step_cost(&mut f.g, o.probs.expect("checked"))?);
        }
        let p = graph_penalty(&mut f.g, &costs, budget.constraint, budget.window)?;
        (p, f.g.value(p).item())
    } else {
        // Constant masks: the penalty carries no gradient.
        let v = penalty(&mask_costs, budget.constraint, budget.window);
        (f.g.scalar(v), v)
    };
    let loss = crate::budget::budgeted_loss(&mut f.g, delta, phi, budget.gamma)?;
    Ok(LossParts {
        loss,
        delta: f.g.value(delta).item(),
        phi: phi_v,
        mask_cost,
        masks,
    })
}
