use rand::Rng as _;

use super::*;
use crate::rng;

fn mat(g: &mut Graph, r: usize, c: usize, d: &[f64]) -> Var {
    g.param(Tensor::matrix(r, c, d.to_vec()).unwrap())
}

#[test]
fn identity_matmul() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::identity(2));
    let b = g.constant(Tensor::identity(2));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &Tensor::identity(2));
}

#[test]
fn hand_matmul() {
    let mut g = Graph::new();
    let a = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let b = mat(&mut g, 2, 1, &[1.0, 1.0]);
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    assert_eq!(g.value(c).shape(), &[2, 1]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    assert_eq!(
        err,
        AutodiffError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
}

#[test]
fn no_general_broadcasting() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, b).is_err());
    let s = g.scalar(2.0);
    let c = g.mul(a, s).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 3]);
}

#[test]
fn elementwise_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 2.0, 0.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let t = g.tanh(x);
    assert_eq!(g.value(t).data()[2], 0.0);
    let p = g.constant(Tensor::scalar(0.3));
    let m = g.max_with_scalar(p, 0.0);
    assert_eq!(g.value(m).item(), 0.3);
    let q = g.constant(Tensor::scalar(-0.2));
    let m = g.max_with_scalar(q, 0.0);
    assert_eq!(g.value(m).item(), 0.0);
}

#[test]
fn kink_pattern_lists_relu_then_max_inputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 2.0, 0.0]));
    let e = g.exp(x);
    g.relu(x);
    g.max_with_scalar(e, 1.0);
    assert_eq!(g.kink_pattern(), vec![false, true, false, false, true, false]);
    assert!(Graph::new().kink_pattern().is_empty());
}

#[test]
fn log_of_negative_is_flagged() {
    let mut g = Graph::new();
    g.set_check_finite(true);
    let x = g.constant(Tensor::scalar(-1.0));
    let y = g.log(x);
    assert!(g.value(y).item().is_nan());
    assert_eq!(g.non_finite().len(), 1);
    assert_eq!(g.non_finite()[0].1, "log");
}

#[test]
fn softmax_symmetry_and_stability() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::row(vec![0.0, 0.0]));
    let s = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::row(vec![1000.0, 0.0]));
    let s = g.softmax(x, 1).unwrap();
    let v = g.value(s).data();
    assert!(v.iter().all(|a| a.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
}

#[test]
fn softmax_sums_to_one_on_either_axis() {
    let mut r = rng::stream(3, &[]);
    let data: Vec<f64> = (0..12).map(|_| r.random_range(-3.0..3.0)).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
    for axis in 0..2 {
        let s = g.softmax(x, axis).unwrap();
        let v = g.value(s);
        let (rows, cols) = (3, 4);
        if axis == 1 {
            for i in 0..rows {
                let t: f64 = (0..cols).map(|j| v.at(i, j)).sum();
                assert!((t - 1.0).abs() < 1e-12);
            }
        } else {
            for j in 0..cols {
                let t: f64 = (0..rows).map(|i| v.at(i, j)).sum();
                assert!((t - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn backward_simple_cases() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.square(x);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_twice_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -1.5]));
    let t = g.tanh(x);
    let sq = g.square(t);
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice = g.grad(x).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(
        g.backward(x),
        Err(AutodiffError::NonScalarLoss { .. })
    ));
}

#[test]
fn constants_never_receive_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(x, c).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn straight_through_forward_is_sample_backward_is_identity() {
    let mut g = Graph::new();
    let p = g.param(Tensor::row(vec![0.3, 0.8]));
    let q = g
        .straight_through(p, Tensor::row(vec![1.0, 0.0]))
        .unwrap();
    assert_eq!(g.value(q).data(), &[1.0, 0.0]);
    let w = g.constant(Tensor::row(vec![2.0, -3.0]));
    let y = g.mul(q, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(p).unwrap(), &[2.0, -3.0]);
}

/// Central-difference round-off at h = 1e-5 is around 1e-11 absolute, so
/// relative errors are measured against at least this magnitude.
const FLOOR: f64 = 1e-4;

/// Builds `sum(w ⊙ op(inputs))` for a random weighting and checks every input
/// coordinate against central differences.
fn fd_check<F>(inputs: Vec<Tensor>, build: F, seed: u64) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let out_numel = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &vars);
        g.value(y).numel()
    };
    let mut r = rng::stream(seed, &[99]);
    let weights: Vec<f64> = (0..out_numel).map(|_| r.random_range(-1.0..1.0)).collect();
    let eval = |ts: &[Tensor], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &vars);
        let shape = g.value(y).shape().to_vec();
        let w = g.constant(Tensor::new(shape, weights.clone()).unwrap());
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p);
        let v = g.value(l).item();
        if !grads {
            return (v, Vec::new());
        }
        g.backward(l).unwrap();
        let gs = vars
            .iter()
            .map(|&x| g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(x).numel()]))
            .collect();
        (v, gs)
    };
    let (_, analytic) = eval(&inputs, true);
    let mut report = GradCheck::default();
    let h = 1e-5;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut f = |x: &[f64]| {
                let mut ts = inputs.clone();
                ts[ti] = Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap();
                eval(&ts, false).0
            };
            let mut x = t.data().to_vec();
            let numeric = central_difference(&mut f, &mut x, i, h);
            report.record(relative_error(analytic[ti][i], numeric, FLOOR));
        }
    }
    report
}

fn rand_tensor(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn every_op_matches_finite_differences() {
    type Build = fn(&mut Graph, &[Var]) -> Var;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap()),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1]).unwrap()),
        ("sub_scalar", vec![vec![2, 3], vec![]], |g, v| g.sub(v[0], v[1]).unwrap()),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1]).unwrap()),
        ("scalar_mul", vec![vec![], vec![3]], |g, v| g.mul(v[0], v[1]).unwrap()),
        ("add_row", vec![vec![3, 2], vec![2]], |g, v| g.add_row(v[0], v[1]).unwrap()),
        ("scale", vec![vec![4]], |g, v| g.scale(v[0], -1.7)),
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
        ("sum_cols", vec![vec![3, 4]], |g, v| g.sum_cols(v[0]).unwrap()),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ("slice_rows", vec![vec![4, 3]], |g, v| g.slice_rows(v[0], 1, 2).unwrap()),
        ("slice_cols", vec![vec![3, 4]], |g, v| g.slice_cols(v[0], 1, 2).unwrap()),
    ];
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, &[]);
        for (name, shapes, build) in &cases {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s)).collect();
            let rep = fd_check(inputs, build, seed);
            assert!(rep.passes(1e-5), "{name} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn random_four_op_graph_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut r = rng::stream(seed, &[7]);
        let inputs = vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[4, 2]), rand_tensor(&mut r, &[2])];
        let rep = fd_check(
            inputs,
            |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                let b = g.add_row(m, v[2]).unwrap();
                let t = g.tanh(b);
                g.softmax(t, 1).unwrap()
            },
            seed,
        );
        assert!(rep.passes(1e-6), "seed {seed}: {rep:?}");
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let run = || {
        let mut r = rng::stream(11, &[]);
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(&mut r, &[5, 7]));
        let b = g.constant(rand_tensor(&mut r, &[7, 3]));
        let c = g.matmul(a, b).unwrap();
        let s = g.softmax(c, 1).unwrap();
        g.value(s).data().to_vec()
    };
    assert_eq!(run(), run());
}
