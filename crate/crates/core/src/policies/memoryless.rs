//! Memory-less policies: an MLP over `[q⊙o, q]` (plus scaled reward-to-go
//! in `rcbc` mode) and a context-free acquisition policy, a learned vector
//! of logits.

use super::{encode_constant, resolve_mask, Encoder, MaskSource, Policy, PolicyConfig, StepInput, StepOutput};
use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::nn::{Activation, Fwd, Init, Mlp, ParamStore};

pub(crate) const LOGITS: &str = "acq.logits";

pub(crate) fn mlp(cfg: &PolicyConfig) -> Mlp {
    let inp = cfg.encoded_dim() + usize::from(cfg.mode.uses_rtg());
    Mlp::new("mlp", inp, cfg.action_dim, &cfg.mlp, Activation::Tanh)
}

pub(super) fn init(cfg: &PolicyConfig, store: &mut ParamStore, seed: u64) {
    mlp(cfg).init(store, seed);
    store.create(seed, LOGITS, &[1, cfg.m()], Init::Zeros);
    store
        .get_mut(LOGITS)
        .expect("just created")
        .data_mut()
        .fill(super::ACQUISITION_INIT_LOGIT);
}

pub(super) fn static_probabilities(policy: &Policy) -> Option<Vec<f64>> {
    if policy.cfg.mode.is_transformer() {
        return None;
    }
    let logits = policy.params.get(LOGITS)?;
    Some(logits.data().iter().map(|&z| crate::autodiff::sigmoid(z)).collect())
}

/// Predicted action for one encoded input row.
pub(crate) fn act(f: &mut Fwd, cfg: &PolicyConfig, net: &Mlp, x: Var, rtg: f64) -> Result<Var> {
    let x = if cfg.mode.uses_rtg() {
        let r = f.g.constant(Tensor::row(vec![rtg / cfg.return_scale]));
        f.g.concat_cols(&[x, r])?
    } else {
        x
    };
    net.forward(f, x)
}

pub(super) fn forward(
    policy: &Policy,
    f: &mut Fwd,
    steps: &[StepInput],
    masks: &mut MaskSource,
) -> Result<Vec<StepOutput>> {
    let cfg = &policy.cfg;
    let net = mlp(cfg);
    let enc = masks
        .evaluates_acquisition()
        .then(|| Encoder::new(&mut f.g, &cfg.features));
    let mut outs = Vec::with_capacity(steps.len());
    for (i, s) in steps.iter().enumerate() {
        let probs = match &enc {
            Some(_) => {
                let z = f.p(LOGITS)?;
                Some(f.g.sigmoid(z))
            }
            None => None,
        };
        let (q, mask) = resolve_mask(&mut f.g, masks, probs, i, &cfg.features)?;
        let x = match (q, &enc) {
            (Some(q), Some(e)) => e.encode(&mut f.g, s.obs, q)?,
            _ => f.g.constant(Tensor::row(encode_constant(s.obs, &mask, &cfg.features))),
        };
        let action = act(f, cfg, &net, x, s.rtg)?;
        outs.push(StepOutput { action, probs, mask });
    }
    Ok(outs)
}
