//! The transformer policies. Tokens are laid out as
//! `start, rtg_1, obs_1, act_1, rtg_2, obs_2, act_2, …`; the acquisition head
//! reads the output at `act_{t-1}` (the start token when `t = 1`), the action
//! head reads the output at `obs_t`.

use super::{encode_constant, resolve_mask, Encoder, MaskSource, Policy, PolicyConfig, StepInput, StepOutput};
use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::nn::{Fwd, Init, KvCache, Linear, ParamStore, Transformer};

pub(crate) const START: &str = "bdt.start";
pub(crate) const TIME: &str = "bdt.time";

pub(crate) fn trunk(cfg: &PolicyConfig) -> Transformer {
    Transformer::new("bdt.trunk", cfg.transformer, 3 * cfg.transformer.context_length + 1)
}

pub(crate) struct Heads {
    pub rtg: Linear,
    pub obs: Linear,
    pub act: Linear,
    pub action: Linear,
    pub acquisition: Linear,
}

pub(crate) fn heads(cfg: &PolicyConfig) -> Heads {
    let d = cfg.transformer.embed_dim;
    Heads {
        rtg: Linear::new("bdt.embed.rtg", 1, d),
        obs: Linear::new("bdt.embed.obs", cfg.encoded_dim(), d),
        act: Linear::new("bdt.embed.act", cfg.action_dim, d),
        action: Linear::new("bdt.head.action", d, cfg.action_dim),
        acquisition: Linear::new("bdt.head.acquisition", d, cfg.m()),
    }
}

pub(super) fn init(cfg: &PolicyConfig, store: &mut ParamStore, seed: u64) {
    let d = cfg.transformer.embed_dim;
    trunk(cfg).init(store, seed);
    let h = heads(cfg);
    for l in [&h.rtg, &h.obs, &h.act, &h.action] {
        l.init(store, seed, Init::Normal(0.02), Init::Zeros);
    }
    store.create(seed, START, &[1, d], Init::Normal(0.02));
    store.create(seed, TIME, &[cfg.horizon, d], Init::Normal(0.02));
    if cfg.mode.has_acquisition() {
        h.acquisition.init(store, seed, Init::Normal(0.02), Init::Zeros);
        let b = store.get_mut("bdt.head.acquisition.b").expect("just created");
        b.data_mut().fill(super::ACQUISITION_INIT_LOGIT);
    }
}

/// Token embedding plus the timestep embedding of `t`.
fn token(f: &mut Fwd, lin: &Linear, x: Var, t: usize) -> Result<Var> {
    let e = lin.forward(f, x)?;
    let table = f.p(TIME)?;
    let te = f.g.slice_rows(table, t, 1)?;
    Ok(f.g.add(e, te)?)
}

pub(crate) fn rtg_token(f: &mut Fwd, h: &Heads, cfg: &PolicyConfig, rtg: f64, t: usize) -> Result<Var> {
    let x = f.g.constant(Tensor::row(vec![rtg / cfg.return_scale]));
    token(f, &h.rtg, x, t)
}

pub(crate) fn act_token(f: &mut Fwd, h: &Heads, action: &[f64], t: usize) -> Result<Var> {
    let x = f.g.constant(Tensor::row(action.to_vec()));
    token(f, &h.act, x, t)
}

pub(crate) fn obs_token_const(f: &mut Fwd, h: &Heads, enc: Vec<f64>, t: usize) -> Result<Var> {
    let x = f.g.constant(Tensor::row(enc));
    token(f, &h.obs, x, t)
}

pub(crate) fn acquisition_probs(f: &mut Fwd, h: &Heads, out_row: Var) -> Result<Var> {
    let z = h.acquisition.forward(f, out_row)?;
    Ok(f.g.sigmoid(z))
}

pub(crate) fn action_out(f: &mut Fwd, h: &Heads, out_row: Var) -> Result<Var> {
    let z = h.action.forward(f, out_row)?;
    Ok(f.g.tanh(z))
}

fn last_row(f: &mut Fwd, out: Var) -> Result<Var> {
    let n = f.g.value(out).shape()[0];
    Ok(f.g.slice_rows(out, n - 1, 1)?)
}

pub(super) fn forward(
    policy: &Policy,
    f: &mut Fwd,
    steps: &[StepInput],
    masks: &mut MaskSource,
) -> Result<Vec<StepOutput>> {
    let cfg = &policy.cfg;
    let trunk = trunk(cfg);
    let h = heads(cfg);
    let enc = masks
        .evaluates_acquisition()
        .then(|| Encoder::new(&mut f.g, &cfg.features));
    let mut cache = KvCache::new();
    let mut pending = vec![f.p(START)?];
    let mut outs = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            let prev = &steps[i - 1];
            pending.push(act_token(f, &h, prev.action, prev.t)?);
        }
        let chunk = f.g.concat_rows(&pending)?;
        pending.clear();
        let out = trunk.forward_chunk(f, chunk, &mut cache)?;
        let probs = match &enc {
            Some(_) => {
                let row = last_row(f, out)?;
                Some(acquisition_probs(f, &h, row)?)
            }
            None => None,
        };
        let (q, mask) = resolve_mask(&mut f.g, masks, probs, i, &cfg.features)?;
        let obs_tok = match (q, &enc) {
            (Some(q), Some(e)) => {
                let x = e.encode(&mut f.g, s.obs, q)?;
                token(f, &h.obs, x, s.t)?
            }
            _ => obs_token_const(f, &h, encode_constant(s.obs, &mask, &cfg.features), s.t)?,
        };
        let rtg_tok = rtg_token(f, &h, cfg, s.rtg, s.t)?;
        let chunk = f.g.concat_rows(&[rtg_tok, obs_tok])?;
        let out = trunk.forward_chunk(f, chunk, &mut cache)?;
        let row = last_row(f, out)?;
        let action = action_out(f, &h, row)?;
        outs.push(StepOutput { action, probs, mask });
    }
    Ok(outs)
}
