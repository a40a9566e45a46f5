use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::autodiff::{central_difference, relative_error, Tensor};
use crate::rng;

fn rand_matrix(seed: u64, r: usize, c: usize) -> Tensor {
    let mut g = rng::stream(seed, &[42]);
    Tensor::new(vec![r, c], (0..r * c).map(|_| g.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn zero_mlp_with_tanh_outputs_zero() {
    let mlp = Mlp::new("m", 4, 3, &MlpConfig { n_layers: 2, hidden: 8, dropout: 0.0 }, Activation::Tanh);
    let mut store = ParamStore::new();
    for l in &mlp.layers {
        l.init(&mut store, 0, Init::Zeros, Init::Zeros);
    }
    let mut f = Fwd::eval(&store);
    let x = f.g.constant(rand_matrix(1, 2, 4));
    let y = mlp.forward(&mut f, x).unwrap();
    assert!(f.g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_linear_layer_passes_input_through() {
    let mlp = Mlp::new("m", 3, 3, &MlpConfig { n_layers: 0, hidden: 0, dropout: 0.0 }, Activation::None);
    let mut store = ParamStore::new();
    store.insert("m.out.w", Tensor::identity(3));
    store.insert("m.out.b", Tensor::zeros(&[3]));
    let mut f = Fwd::eval(&store);
    let xv = rand_matrix(2, 1, 3);
    let x = f.g.constant(xv.clone());
    let y = mlp.forward(&mut f, x).unwrap();
    assert_eq!(f.g.value(y), &xv);
}

#[test]
fn mlp_mse_gradient_matches_finite_differences() {
    let cfg = MlpConfig { n_layers: 3, hidden: 256, dropout: 0.0 };
    let mlp = Mlp::new("m", 5, 2, &cfg, Activation::Tanh);
    let mut store = ParamStore::new();
    mlp.init(&mut store, 3);
    let x = rand_matrix(4, 3, 5);
    let target = rand_matrix(5, 3, 2);
    let loss = |store: &ParamStore, grads: bool| {
        let mut f = Fwd::new(store, grads, None);
        let xv = f.g.constant(x.clone());
        let y = mlp.forward(&mut f, xv).unwrap();
        let t = f.g.constant(target.clone());
        let d = f.g.sub(y, t).unwrap();
        let sq = f.g.square(d);
        let l = f.g.mean(sq);
        let v = f.g.value(l).item();
        if grads {
            f.g.backward(l).unwrap();
        }
        (v, f.grads())
    };
    let (_, grads) = loss(&store, true);
    let mut r = rng::stream(9, &[]);
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..150 {
        let name = &names[r.random_range(0..names.len())];
        let n = store.get(name).unwrap().numel();
        let i = r.random_range(0..n);
        let mut x0 = store.get(name).unwrap().data().to_vec();
        let mut fd = |x: &[f64]| {
            let mut s = store.clone();
            s.get_mut(name).unwrap().data_mut().copy_from_slice(x);
            loss(&s, false).0
        };
        let numeric = central_difference(&mut fd, &mut x0, i, 1e-5);
        let analytic = grads.map[name][i];
        worst = worst.max(relative_error(analytic, numeric, 1e-4));
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

fn small_transformer(layers: usize, heads: usize, d: usize) -> (Transformer, ParamStore) {
    let cfg = TransformerConfig {
        n_layers: layers,
        n_heads: heads,
        embed_dim: d,
        context_length: 4,
        dropout: 0.1,
        causal: true,
    };
    let t = Transformer::new("tf", cfg, 16);
    let mut store = ParamStore::new();
    t.init(&mut store, 11);
    // Larger weights than the default init, so attention is far from uniform.
    for (_, p) in store.iter_mut() {
        if p.shape().len() == 2 {
            p.data_mut().iter_mut().for_each(|v| *v *= 25.0);
        }
    }
    (t, store)
}

fn run(t: &Transformer, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut f = Fwd::eval(store);
    let xv = f.g.constant(x.clone());
    let y = t.forward(&mut f, xv).unwrap();
    f.g.value(y).clone()
}

#[test]
fn single_token_attends_to_itself() {
    let (t, store) = small_transformer(1, 1, 4);
    let mut f = Fwd::eval(&store);
    let x = f.g.constant(rand_matrix(1, 1, 4));
    t.forward(&mut f, x).unwrap();
    // The only softmax on the graph is over a single logit.
    let n = f.g.len();
    let found = (0..n).any(|i| {
        let v = f.g.value(crate::autodiff::Var(i));
        v.shape() == [1, 1] && v.data()[0] == 1.0
    });
    assert!(found);
}

#[test]
fn future_tokens_do_not_affect_the_past() {
    let (t, store) = small_transformer(2, 2, 6);
    let x = rand_matrix(20, 7, 6);
    let base = run(&t, &store, &x);
    for pos in 0..7 {
        let mut y = x.clone();
        for j in 0..6 {
            y.data_mut()[pos * 6 + j] += 0.7 * (j as f64 + 1.0);
        }
        let out = run(&t, &store, &y);
        assert_eq!(&base.data()[..pos * 6], &out.data()[..pos * 6]);
        assert_ne!(&base.data()[pos * 6..], &out.data()[pos * 6..]);
    }
}

#[test]
fn chunked_decoding_matches_a_full_pass_bitwise() {
    let (t, store) = small_transformer(2, 2, 6);
    let x = rand_matrix(21, 7, 6);
    let full = run(&t, &store, &x);
    let mut f = Fwd::eval(&store);
    let mut cache = KvCache::new();
    let mut rows = Vec::new();
    for (start, len) in [(0, 1), (1, 2), (3, 1), (4, 3)] {
        let xs = Tensor::new(vec![len, 6], x.data()[start * 6..(start + len) * 6].to_vec()).unwrap();
        let v = f.g.constant(xs);
        let y = t.forward_chunk(&mut f, v, &mut cache).unwrap();
        rows.extend_from_slice(f.g.value(y).data());
    }
    assert_eq!(cache.len(), 7);
    assert_eq!(full.data(), rows.as_slice());
}

#[test]
fn too_long_sequences_are_rejected() {
    let (t, store) = small_transformer(1, 1, 4);
    let mut f = Fwd::eval(&store);
    let x = f.g.constant(Tensor::zeros(&[17, 4]));
    assert!(t.forward(&mut f, x).is_err());
}

fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (i, o) = w.dims2().unwrap();
    (0..o)
        .map(|j| b.data()[j] + (0..i).map(|k| x[k] * w.at(k, j)).sum::<f64>())
        .collect()
}

#[test]
fn two_token_attention_matches_hand_evaluation() {
    let d = 3;
    let (t, mut store) = small_transformer(1, 1, d);
    // Silence the MLP so the block is attention plus residual.
    store.insert("tf.h0.mlp.fc2.w", Tensor::zeros(&[4 * d, d]));
    let x = rand_matrix(5, 2, d);
    let got = run(&t, &store, &x);

    let p = |n: &str| store.get(&format!("tf.h0.attn.{n}")).unwrap().clone();
    let rows: Vec<Vec<f64>> = (0..2).map(|i| x.row_slice(i).to_vec()).collect();
    let n1: Vec<Vec<f64>> = rows.iter().map(|r| layer_norm_row(r)).collect();
    let q: Vec<Vec<f64>> = n1.iter().map(|r| affine(r, &p("q.w"), &p("q.b"))).collect();
    let k: Vec<Vec<f64>> = n1.iter().map(|r| affine(r, &p("k.w"), &p("k.b"))).collect();
    let v: Vec<Vec<f64>> = n1.iter().map(|r| affine(r, &p("v.w"), &p("v.b"))).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt();
    let mut expected = Vec::new();
    for i in 0..2 {
        let logits: Vec<f64> = (0..=i).map(|j| dot(&q[i], &k[j])).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let att: Vec<f64> = (0..d).map(|c| (0..=i).map(|j| e[j] / s * v[j][c]).sum()).collect();
        let o = affine(&att, &p("o.w"), &p("o.b"));
        let h: Vec<f64> = rows[i].iter().zip(&o).map(|(a, b)| a + b).collect();
        // fc2 bias is zero, so the MLP branch adds nothing.
        expected.extend(layer_norm_row(&h));
    }
    for (a, b) in got.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn evaluation_passes_are_deterministic_and_training_uses_dropout() {
    let (t, store) = small_transformer(1, 1, 4);
    let x = rand_matrix(6, 3, 4);
    assert_eq!(run(&t, &store, &x), run(&t, &store, &x));
    let train = |seed| {
        let mut f = Fwd::new(&store, true, Some(rng::stream(seed, &[])));
        let xv = f.g.constant(x.clone());
        let y = t.forward(&mut f, xv).unwrap();
        f.g.value(y).clone()
    };
    assert_ne!(train(1), run(&t, &store, &x));
    assert_eq!(train(1), train(1));
}

#[test]
fn config_validation() {
    let mut c = TransformerConfig::default();
    assert!(c.validate().is_ok());
    c.n_heads = 3;
    assert!(c.validate().is_err());
    c.n_heads = 1;
    c.context_length = 0;
    assert!(c.validate().is_err());
}

fn one_param(v: Vec<f64>) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::vector(v));
    s
}

fn grads_of(v: Vec<f64>) -> Grads {
    let mut g = Grads::default();
    g.map.insert("w".into(), v);
    g
}

#[test]
fn zero_gradient_without_decay_leaves_parameters() {
    let mut s = one_param(vec![0.5, -1.0]);
    let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::mlp() });
    for _ in 0..5 {
        opt.step(&mut s, &mut grads_of(vec![0.0, 0.0])).unwrap();
    }
    assert_eq!(s.get("w").unwrap().data(), &[0.5, -1.0]);
    assert_eq!(opt.step, 5);
}

#[test]
fn clipping_scales_by_ratio() {
    let mut s = one_param(vec![0.0, 0.0]);
    let mut opt = Adam::new(AdamConfig::transformer());
    let mut g = grads_of(vec![6.0, 8.0]);
    let st = opt.step(&mut s, &mut g).unwrap();
    assert_eq!(st.grad_norm, 10.0);
    assert!((st.clip_scale - 0.025).abs() < 1e-15);
    assert!((g.map["w"][0] - 0.15).abs() < 1e-15 && (g.map["w"][1] - 0.2).abs() < 1e-15);
}

#[test]
fn nan_gradient_is_rejected() {
    let mut s = one_param(vec![0.0]);
    let mut opt = Adam::new(AdamConfig::mlp());
    let err = opt.step(&mut s, &mut grads_of(vec![f64::NAN])).unwrap_err();
    assert!(err.to_string().contains('w'));
    assert_eq!(opt.step, 0);
}

#[test]
fn adam_decreases_a_quadratic() {
    let mut s = one_param(vec![3.0]);
    let mut opt = Adam::new(AdamConfig { lr: 0.05, weight_decay: 0.0, grad_clip: 0.0, ..AdamConfig::mlp() });
    let mut prev = f64::INFINITY;
    for k in 0..40 {
        let w = s.get("w").unwrap().data()[0];
        let f = w * w;
        if k >= 3 {
            assert!(f < prev, "step {k}: {f} !< {prev}");
        }
        prev = f;
        opt.step(&mut s, &mut grads_of(vec![2.0 * w])).unwrap();
    }
    assert!(prev < 2.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut s = ParamStore::new();
    s.insert("a", Tensor::vector(vec![-0.0, 1e-310, f64::MAX, std::f64::consts::PI]));
    s.insert("b", rand_matrix(7, 3, 5));
    let ck = Checkpoint::new(TransformerConfig::default(), &s);
    let json = ck.to_json();
    let back: Checkpoint<TransformerConfig> = Checkpoint::from_json(&json).unwrap();
    let s2 = back.params().unwrap();
    for ((ka, ta), (kb, tb)) in s.iter().zip(s2.iter()) {
        assert_eq!(ka, kb);
        assert_eq!(ta.shape(), tb.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
    assert_eq!(back.config, TransformerConfig::default());
    assert_eq!(back.to_json(), json);
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let s = one_param(vec![1.0]);
    let json = Checkpoint::new(0u8, &s).to_json().replace("format_version\": 1", "format_version\": 9");
    assert!(Checkpoint::<u8>::from_json(&json).is_err());
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_threshold(v in prop::collection::vec(-1e3f64..1e3, 1..20), clip in 1e-3f64..10.0) {
        let mut s = one_param(vec![0.0; v.len()]);
        let mut opt = Adam::new(AdamConfig { grad_clip: clip, ..AdamConfig::mlp() });
        let mut g = grads_of(v);
        opt.step(&mut s, &mut g).unwrap();
        prop_assert!(g.global_norm() <= clip + 1e-9);
    }
}
