//! Analytic gradients against central differences: every graph operation on
//! random inputs, then the full BDT sequence loss with every parameter.

use rand::Rng as _;

use super::Verdict;
use crate::autodiff::{central_difference, relative_error, GradCheck, Graph, Tensor, Var};
use crate::data::{generate_dataset, make_slice, Slice};
use crate::envs::{make_env, Quality};
use crate::error::Result;
use crate::exec::Execution;
use crate::nn::{Fwd, MlpConfig, TransformerConfig};
use crate::policies::{sequence_loss, LossBudget, MaskSource, Mode, Policy, PolicyConfig};
use crate::rng::{self, tag, Rng};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
/// Below this magnitude, errors are measured in absolute terms.
const FLOOR: f64 = 1e-4;
const SEEDS: u64 = 20;
/// Coordinates whose difference interval crosses a relu or hinge kink are
/// excluded; more than this share of them fails the check.
const MAX_KINK_SHARE: f64 = 0.01;

type Build = fn(&mut Graph, &[Var]) -> Var;

fn cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap()),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1]).unwrap()),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1]).unwrap()),
        ("sub_scalar", vec![vec![2, 3], vec![]], |g, v| g.sub(v[0], v[1]).unwrap()),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1]).unwrap()),
        ("scalar_mul", vec![vec![], vec![3]], |g, v| g.mul(v[0], v[1]).unwrap()),
        ("add_row", vec![vec![3, 2], vec![2]], |g, v| g.add_row(v[0], v[1]).unwrap()),
        ("scale", vec![vec![4]], |g, v| g.scale(v[0], -1.7)),
        ("neg", vec![vec![4]], |g, v| g.neg(v[0])),
        ("add_scalar", vec![vec![4]], |g, v| g.add_scalar(v[0], 0.4)),
        ("tanh", vec![vec![5]], |g, v| g.tanh(v[0])),
        ("sigmoid", vec![vec![5]], |g, v| g.sigmoid(v[0])),
        ("exp", vec![vec![5]], |g, v| g.exp(v[0])),
        ("log", vec![vec![5]], |g, v| {
            let e = g.exp(v[0]);
            g.log(e)
        }),
        ("square", vec![vec![5]], |g, v| g.square(v[0])),
        ("relu", vec![vec![6]], |g, v| g.relu(v[0])),
        ("max_with_scalar", vec![vec![6]], |g, v| g.max_with_scalar(v[0], 0.25)),
        ("softmax_rows", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1).unwrap()),
        ("softmax_cols", vec![vec![3, 4]], |g, v| g.softmax(v[0], 0).unwrap()),
        ("layer_norm", vec![vec![3, 5], vec![5], vec![5]], |g, v| {
            g.layer_norm(v[0], v[1], v[2]).unwrap()
        }),
        ("transpose", vec![vec![2, 3]], |g, v| g.transpose(v[0]).unwrap()),
        ("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
        ("sum_cols", vec![vec![3, 4]], |g, v| g.sum_cols(v[0]).unwrap()),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ("slice_rows", vec![vec![4, 3]], |g, v| g.slice_rows(v[0], 1, 2).unwrap()),
        ("slice_cols", vec![vec![3, 4]], |g, v| g.slice_cols(v[0], 1, 2).unwrap()),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4]).unwrap()),
    ]
}

fn rand_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).expect("shape")
}

/// `Σ w ⊙ op(inputs)` with a fixed random weighting, and its gradients.
fn weighted(inputs: &[Tensor], build: Build, weights: &[f64], grads: bool) -> (f64, Vec<Vec<f64>>, Vec<bool>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights.to_vec()).expect("weights"));
    let p = g.mul(y, w).expect("same shape");
    let l = g.sum(p);
    let v = g.value(l).item();
    if !grads {
        return (v, Vec::new(), g.kink_pattern());
    }
    g.backward(l).expect("scalar loss");
    let gs = vars
        .iter()
        .map(|&x| g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(x).numel()]))
        .collect();
    (v, gs, Vec::new())
}

fn check_op(shapes: &[Vec<usize>], build: Build, seed: u64) -> GradCheck {
    let mut r = rng::stream(seed, &[tag::ACCEPTANCE, 1]);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s)).collect();
    let out_numel = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &vars);
        g.value(y).numel()
    };
    let weights: Vec<f64> = (0..out_numel).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, analytic, _) = weighted(&inputs, build, &weights, true);
    let mut report = GradCheck::default();
    for (ti, t) in inputs.iter().enumerate() {
        let mut x = t.data().to_vec();
        for i in 0..t.numel() {
            let mut patterns = Vec::new();
            let mut f = |x: &[f64]| {
                let mut ts = inputs.to_vec();
                ts[ti] = Tensor::new(t.shape().to_vec(), x.to_vec()).expect("shape");
                let (v, _, p) = weighted(&ts, build, &weights, false);
                patterns.push(p);
                v
            };
            let numeric = central_difference(&mut f, &mut x, i, H);
            if patterns[0] != patterns[1] {
                report.skip_kink();
            } else {
                report.record(relative_error(analytic[ti][i], numeric, FLOOR));
            }
        }
    }
    report
}

/// The straight-through node has a piecewise-constant forward pass, so its
/// backward pass is checked directly: the gradient of `Σ w ⊙ st(p)` with
/// respect to `p` is `w`.
fn straight_through_ok(seed: u64) -> bool {
    let mut r = rng::stream(seed, &[tag::ACCEPTANCE, 2]);
    let p: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
    let sample: Vec<f64> = p.iter().map(|&x| if r.random::<f64>() < x { 1.0 } else { 0.0 }).collect();
    let w: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new();
    let pv = g.param(Tensor::row(p));
    let st = g.straight_through(pv, Tensor::row(sample.clone())).expect("shape");
    let forward_ok = g.value(st).data() == sample.as_slice();
    let wv = g.constant(Tensor::row(w.clone()));
    let m = g.mul(st, wv).expect("shape");
    let l = g.sum(m);
    g.backward(l).expect("scalar");
    forward_ok && g.grad(pv).map(|x| x == w.as_slice()).unwrap_or(false)
}

fn bdt_policy(seed: u64) -> Result<Policy> {
    let spec = make_env("chainrunner")?.spec().clone();
    let mut cfg = PolicyConfig::for_env(Mode::Bdt, &spec);
    cfg.transformer = TransformerConfig {
        n_layers: 1,
        n_heads: 2,
        embed_dim: 8,
        context_length: 4,
        dropout: 0.1,
        causal: true,
    };
    cfg.mlp = MlpConfig::default();
    let mut p = Policy::new(cfg, seed)?;
    // Spread the acquisition logits so probabilities sit away from saturation.
    let mut r = rng::stream(seed, &[tag::ACCEPTANCE, 3]);
    for (name, t) in p.params.iter_mut() {
        if name.starts_with("bdt.head.acquisition") {
            for v in t.data_mut() {
                *v += r.random_range(-1.0..1.0);
            }
        }
    }
    Ok(p)
}

/// Loss of a slice with the straight-through draws replaced by fixed offsets,
/// making it a smooth function of the parameters.
fn shifted_loss(p: &Policy, s: &Slice, shifts: &[Vec<f64>], budget: LossBudget, seed: u64) -> Result<(f64, Vec<bool>)> {
    let mut f = Fwd::new(&p.params, true, Some(rng::stream(seed, &[tag::ACCEPTANCE, 4])));
    let parts = sequence_loss(p, &mut f, s, budget, MaskSource::Shift(shifts))?;
    Ok((f.g.value(parts.loss).item(), f.g.kink_pattern()))
}

fn check_sequence_loss(seed: u64, slices: &[Slice]) -> Result<(GradCheck, bool)> {
    let mut p = bdt_policy(seed)?;
    let mut r = rng::stream(seed, &[tag::ACCEPTANCE, 5]);
    let s = &slices[seed as usize % slices.len()];
    let m = p.cfg.m();
    let k = s.len_valid();
    let shifts: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..m).map(|_| if r.random::<bool>() { 0.4 } else { -0.4 }).collect())
        .collect();
    let budget = LossBudget {
        constraint: 0.2,
        window: 2,
        gamma: 0.8,
    };

    let mut f = Fwd::new(&p.params, true, Some(rng::stream(seed, &[tag::ACCEPTANCE, 4])));
    let parts = sequence_loss(&p, &mut f, s, budget, MaskSource::Shift(&shifts))?;
    let penalized = parts.phi > 0.0;
    f.g.backward(parts.loss)?;
    let grads = f.grads();

    let names: Vec<String> = p.params.iter().map(|(n, _)| n.clone()).collect();
    let mut report = GradCheck::default();
    for name in names {
        let analytic = grads.map.get(&name).cloned();
        let mut x = p.params.get(&name).expect("listed").data().to_vec();
        for i in 0..x.len() {
            let mut patterns = Vec::new();
            let mut f = |x: &[f64]| {
                p.params.get_mut(&name).expect("listed").data_mut()[i] = x[i];
                let (v, pat) = shifted_loss(&p, s, &shifts, budget, seed).unwrap_or((f64::NAN, Vec::new()));
                patterns.push(pat);
                v
            };
            let numeric = central_difference(&mut f, &mut x, i, H);
            p.params.get_mut(&name).expect("listed").data_mut()[i] = x[i];
            if patterns[0] != patterns[1] {
                report.skip_kink();
                continue;
            }
            let a = analytic.as_ref().map(|g| g[i]).unwrap_or(0.0);
            report.record(relative_error(a, numeric, FLOOR));
        }
    }
    Ok((report, penalized))
}

pub(super) fn check() -> Result<super::Verdict> {
    let mut ops = GradCheck::default();
    let mut worst_op = ("", 0.0);
    for seed in 0..SEEDS {
        for (name, shapes, build) in cases() {
            let rep = check_op(&shapes, build, seed);
            if !(rep.max_rel_err <= worst_op.1) {
                worst_op = (name, rep.max_rel_err);
            }
            ops.merge(&rep);
        }
    }
    let st_ok = (0..SEEDS).all(straight_through_ok);

    let ds = generate_dataset("chainrunner", Quality::Medium, 4, 0, Execution::Sequential)?;
    let slices: Vec<Slice> = ds
        .episodes
        .iter()
        .enumerate()
        .flat_map(|(i, ep)| [make_slice(ep, i, 0, 4), make_slice(ep, i, 2, 4), make_slice(ep, i, 9, 4)])
        .collect();
    let mut loss = GradCheck::default();
    let mut penalized = 0;
    for seed in 0..SEEDS {
        let (rep, pen) = check_sequence_loss(seed, &slices)?;
        loss.merge(&rep);
        penalized += pen as usize;
    }
    let kinks_ok = |g: &GradCheck| g.skipped_kinks as f64 <= MAX_KINK_SHARE * (g.checked + g.skipped_kinks) as f64;
    let passed = ops.passes(TOL) && loss.passes(TOL) && kinks_ok(&ops) && kinks_ok(&loss) && st_ok && penalized > 0;
    Ok(Verdict::new(
        passed,
        format!(
            "{} ops x {SEEDS} seeds, {} coords ({} at kinks), max rel err {:.2e} ({}); BDT loss {} coords ({} at kinks), max rel err {:.2e}, {penalized}/{SEEDS} with active penalty; straight-through {}; tol {TOL:.0e}",
            cases().len(),
            ops.checked,
            ops.skipped_kinks,
            ops.max_rel_err,
            worst_op.0,
            loss.checked,
            loss.skipped_kinks,
            loss.max_rel_err,
            if st_ok { "ok" } else { "mismatch" },
        ),
    ))
}
