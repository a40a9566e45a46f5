//! Metamorphic suites: outputs at a step never depend on later steps, and
//! never depend on the values of features that were not acquired.

use rand::Rng as _;

use super::Verdict;
use crate::autodiff::Var;
use crate::budget::QueryMask;
use crate::data::{generate_dataset, make_slice, Episode, Slice};
use crate::envs::{make_env, Quality};
use crate::error::Result;
use crate::exec::Execution;
use crate::nn::{Fwd, MlpConfig, TransformerConfig};
use crate::policies::{MaskSource, Mode, Policy, PolicyConfig, StepInput};
use crate::rng::{self, tag, Rng};

const TRIALS: usize = 1000;
const ENVS: [&str; 2] = ["gridnav", "chainrunner"];

fn policy(mode: Mode, env: &str, seed: u64) -> Result<Policy> {
    let spec = make_env(env)?.spec().clone();
    let mut cfg = PolicyConfig::for_env(mode, &spec);
    cfg.transformer = TransformerConfig {
        n_layers: 2,
        n_heads: 2,
        embed_dim: 8,
        context_length: 5,
        dropout: 0.1,
        causal: true,
    };
    cfg.mlp = MlpConfig {
        n_layers: 2,
        hidden: 8,
        dropout: 0.1,
    };
    Policy::new(cfg, seed)
}

fn inputs(s: &Slice) -> Vec<StepInput<'_>> {
    s.steps().map(|(obs, action, rtg, t)| StepInput { obs, action, rtg, t }).collect()
}

fn action_values(f: &Fwd, outs: &[crate::policies::StepOutput]) -> Vec<Vec<f64>> {
    let v = |x: Var| f.g.value(x).data().to_vec();
    outs.iter().map(|o| v(o.action)).collect()
}

fn random_slice(eps: &[Episode], k: usize, r: &mut Rng) -> Slice {
    let i = r.random_range(0..eps.len());
    let start = r.random_range(0..eps[i].len());
    make_slice(&eps[i], i, start, k)
}

/// Perturbs observations, actions and rtg after real step `t`, and checks
/// actions, probabilities and sampled masks up to `t` are unchanged.
fn causality_trial(trial: usize, p: &Policy, eps: &[Episode], r: &mut Rng) -> Result<bool> {
    let k = p.cfg.context_length();
    let base = random_slice(eps, k, r);
    let real = base.len_valid();
    let t = r.random_range(0..real);
    let mut other = base.clone();
    let pad = base.pad();
    for i in pad + t + 1..k {
        for v in other.observations[i].iter_mut() {
            *v += r.random_range(-3.0..3.0);
        }
        for v in other.actions[i].iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        other.rtg[i] += r.random_range(-20.0..20.0);
    }
    let run = |s: &Slice| -> Result<(Vec<Vec<f64>>, Vec<Option<Vec<f64>>>, Vec<QueryMask>)> {
        let seed = trial as u64;
        let mut f = Fwd::new(&p.params, true, Some(rng::stream(seed, &[tag::ACCEPTANCE, 30])));
        let mut mr = rng::stream(seed, &[tag::ACCEPTANCE, 31]);
        let full = vec![QueryMask::ones(p.cfg.m()); real];
        let src = if p.cfg.mode.has_acquisition() {
            MaskSource::Sample(&mut mr)
        } else {
            MaskSource::Forced(&full)
        };
        let outs = p.forward(&mut f, &inputs(s), src)?;
        let probs = outs
            .iter()
            .map(|o| o.probs.map(|x| f.g.value(x).data().to_vec()))
            .collect();
        Ok((action_values(&f, &outs), probs, outs.into_iter().map(|o| o.mask).collect()))
    };
    let (a, pa, qa) = run(&base)?;
    let (b, pb, qb) = run(&other)?;
    Ok(a[..=t] == b[..=t] && pa[..=t] == pb[..=t] && qa[..=t] == qb[..=t])
}

/// Randomizes every unacquired value and checks all outputs are unchanged,
/// with the masks either forced or replayed through the estimator.
fn masking_trial(p: &Policy, eps: &[Episode], r: &mut Rng) -> Result<bool> {
    let spec = p.cfg.features.clone();
    let k = p.cfg.context_length();
    let s = random_slice(eps, k, r);
    let real = s.len_valid();
    let density = r.random_range(0.0..1.0);
    let masks: Vec<QueryMask> = (0..real)
        .map(|_| QueryMask::new((0..spec.m()).map(|_| r.random_bool(density)).collect()))
        .collect();
    let mut other = s.clone();
    let offsets = spec.offsets();
    let pad = s.pad();
    for (t, q) in masks.iter().enumerate() {
        for i in (0..spec.m()).filter(|&i| !q.get(i)) {
            for j in 0..spec.widths()[i] {
                other.observations[pad + t][offsets[i] + j] = r.random_range(-100.0..100.0);
            }
        }
    }
    let run = |s: &Slice, replay: bool| -> Result<(Vec<Vec<f64>>, Vec<Option<Vec<f64>>>)> {
        let mut f = Fwd::eval(&p.params);
        let src = if replay {
            MaskSource::Replay(&masks)
        } else {
            MaskSource::Forced(&masks)
        };
        let outs = p.forward(&mut f, &inputs(s), src)?;
        let probs = outs
            .iter()
            .map(|o| o.probs.map(|x| f.g.value(x).data().to_vec()))
            .collect();
        Ok((action_values(&f, &outs), probs))
    };
    let mut ok = run(&s, false)? == run(&other, false)?;
    if p.cfg.mode.has_acquisition() {
        ok &= run(&s, true)? == run(&other, true)?;
    }
    Ok(ok)
}

pub(super) fn check() -> Result<Verdict> {
    let data: Vec<Vec<Episode>> = ENVS
        .iter()
        .map(|e| generate_dataset(e, Quality::Medium, 6, 3, Execution::Sequential).map(|d| d.episodes))
        .collect::<Result<_>>()?;
    let mut r = rng::stream(0, &[tag::ACCEPTANCE, 32]);
    let (mut causal_bad, mut mask_bad) = (0usize, 0usize);
    for trial in 0..TRIALS {
        let mode = Mode::ALL[trial % Mode::ALL.len()];
        let e = (trial / Mode::ALL.len()) % ENVS.len();
        let p = policy(mode, ENVS[e], trial as u64)?;
        if !causality_trial(trial, &p, &data[e], &mut r)? {
            causal_bad += 1;
        }
        if !masking_trial(&p, &data[e], &mut r)? {
            mask_bad += 1;
        }
    }
    Ok(Verdict::new(
        causal_bad == 0 && mask_bad == 0,
        format!(
            "future-input invariance {causal_bad}/{TRIALS} violations; unacquired-value invariance {mask_bad}/{TRIALS} violations; all four modes, two environments"
        ),
    ))
}
