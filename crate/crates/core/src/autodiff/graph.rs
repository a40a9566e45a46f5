use super::{AutodiffError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryKind, Broadcast, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    MaxScalar(Var, f64),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    StraightThrough(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(BinaryKind::Add, ..) => "add",
            Op::Binary(BinaryKind::Sub, ..) => "sub",
            Op::Binary(BinaryKind::Mul, ..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::MaxScalar(..) => "max_with_scalar",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::StraightThrough(..) => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A dynamically recorded computation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// valid topological order. [`Graph::backward`] walks it once in reverse and
/// accumulates `∂loss/∂leaf` into every leaf created with `requires_grad`.
/// Calling it twice without [`Graph::zero_grad`] accumulates twice.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    non_finite: Vec<(Var, &'static str)>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

type Result<T> = std::result::Result<T, AutodiffError>;

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            non_finite: Vec::new(),
        }
    }

    pub fn with_capacity(n: usize) -> Self {
        let mut g = Graph::new();
        g.nodes.reserve(n);
        g
    }

    /// Enables or disables the per-op non-finite scan (on in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Ops that produced NaN or infinity while the finite check was enabled.
    pub fn non_finite(&self) -> &[(Var, &'static str)] {
        &self.non_finite
    }

    /// Which side of its kink every input element of `relu` and
    /// `max_with_scalar` lies on. Two evaluations of the same graph structure
    /// with equal patterns lie on one smooth piece of the function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::Relu(x) => out.extend(self.nodes[x.0].value.data().iter().map(|&a| a > 0.0)),
                Op::MaxScalar(x, floor) => out.extend(self.nodes[x.0].value.data().iter().map(|&a| a > floor)),
                _ => {}
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        if self.check_finite && !value.all_finite() {
            let name = op.name();
            // -inf is the causal fill value fed into softmax; anything else is a real problem.
            let only_neg_inf = value.data().iter().all(|v| v.is_finite() || *v == f64::NEG_INFINITY);
            if !(only_neg_inf && matches!(op, Op::Leaf | Op::Binary(..))) {
                log::warn!("non-finite output from {name} at node {}", id.0);
                self.non_finite.push((id, name));
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        id
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Only leaves with `requires_grad` receive gradient.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0]
            .value
            .dims2()
            .ok_or_else(|| AutodiffError::Rank {
                op,
                shape: self.shape(v).to_vec(),
            })
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, x: Var, op: Op, f: F) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::with_shape(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (bc, out) = if av.shape() == bv.shape() {
            let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            (Broadcast::Same, Tensor::with_shape(av.shape().to_vec(), d))
        } else if bv.is_scalar_like() {
            let y = bv.data()[0];
            let d = av.data().iter().map(|&x| f(x, y)).collect();
            (Broadcast::RhsScalar, Tensor::with_shape(av.shape().to_vec(), d))
        } else if av.is_scalar_like() {
            let x = av.data()[0];
            let d = bv.data().iter().map(|&y| f(x, y)).collect();
            (Broadcast::LhsScalar, Tensor::with_shape(bv.shape().to_vec(), d))
        } else {
            return Err(AutodiffError::Shape {
                op: match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Mul => "mul",
                },
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, bc, a, b), rg))
    }

    /// Elementwise sum; shapes must match or one side must be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2("add_row", x)?;
        if self.nodes[bias.0].value.numel() != c {
            return Err(AutodiffError::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            d.extend(xv[i * c..(i + 1) * c].iter().zip(bv).map(|(a, b)| a + b));
        }
        let out = Tensor::with_shape(self.shape(x).to_vec(), d);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log. Non-positive inputs produce NaN/-inf, which the finite
    /// check records.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    /// `max(x, floor)` elementwise; gradient flows only where `x > floor`.
    pub fn max_with_scalar(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::MaxScalar(x, floor), |a| if a > floor { a } else { floor })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = mm(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::with_shape(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let xv = self.nodes[x.0].value.data();
        let mut d = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::with_shape(vec![c, r], d), Op::Transpose(x), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::Axis { axis, shape });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.nodes[x.0].value.data();
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * len * inner + i * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..len {
                    mx = mx.max(xv[idx(i)]);
                }
                let mut s = 0.0;
                for i in 0..len {
                    let e = (xv[idx(i)] - mx).exp();
                    y[idx(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    y[idx(i)] /= s;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::with_shape(shape, y),
            Op::Softmax { x, outer, len, inner },
            rg,
        ))
    }

    /// Layer normalization over the last axis of an `r × c` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.dims2("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.nodes[p.0].value.numel() != c {
                return Err(AutodiffError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                y[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::with_shape(shape, y),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Row sums of an `r × c` matrix, as an `r × 1` column.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("sum_cols", x)?;
        let xv = self.nodes[x.0].value.data();
        let d = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::with_shape(vec![r, 1], d), Op::SumCols(x), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.dims2("concat_rows", p)?.1,
            None => return Err(AutodiffError::Empty { op: "concat_rows" }),
        };
        let mut rows = 0;
        let mut d = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            d.extend_from_slice(self.nodes[p.0].value.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::with_shape(vec![rows, c], d),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = match parts.first() {
            Some(&p) => self.dims2("concat_cols", p)?.0,
            None => return Err(AutodiffError::Empty { op: "concat_cols" }),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return Err(AutodiffError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                d.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::with_shape(vec![r, c], d),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start + len > r {
            return Err(AutodiffError::Range {
                op: "slice_rows",
                start,
                len,
                shape: self.shape(x).to_vec(),
            });
        }
        let d = self.nodes[x.0].value.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::with_shape(vec![len, c], d), Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", x)?;
        if start + len > c {
            return Err(AutodiffError::Range {
                op: "slice_cols",
                start,
                len,
                shape: self.shape(x).to_vec(),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let mut d = Vec::with_capacity(r * len);
        for i in 0..r {
            d.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::with_shape(vec![r, len], d), Op::SliceCols(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(AutodiffError::Shape {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::with_shape(shape.to_vec(), v.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// A constant copy of `x`: same value, no gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    /// Forward value is `sample` exactly; backward passes the incoming
    /// gradient to `probs` unchanged. Equivalent to
    /// `sample + probs - detach(probs)` without the rounding.
    pub fn straight_through(&mut self, probs: Var, sample: Tensor) -> Result<Var> {
        if sample.shape() != self.shape(probs) {
            return Err(AutodiffError::Shape {
                op: "straight_through",
                lhs: self.shape(probs).to_vec(),
                rhs: sample.shape().to_vec(),
            });
        }
        let rg = self.rg(probs);
        Ok(self.push(sample, Op::StraightThrough(probs), rg))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Binary(kind, bc, a, b) => {
                let (av, bv) = (val(a), val(b));
                // d(out)/d(a) and d(out)/d(b) for each element pair
                let da = |_x: f64, y: f64| match kind {
                    BinaryKind::Add | BinaryKind::Sub => 1.0,
                    BinaryKind::Mul => y,
                };
                let db = |x: f64, _y: f64| match kind {
                    BinaryKind::Add => 1.0,
                    BinaryKind::Sub => -1.0,
                    BinaryKind::Mul => x,
                };
                match bc {
                    Broadcast::Same => {
                        acc(a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * da(av[k], bv[k]);
                            }
                        });
                        acc(b, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * db(av[k], bv[k]);
                            }
                        });
                    }
                    Broadcast::RhsScalar => {
                        let y = bv[0];
                        acc(a, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * da(av[k], y);
                            }
                        });
                        acc(b, &mut |s| {
                            let mut t = 0.0;
                            for k in 0..g.len() {
                                t += g[k] * db(av[k], y);
                            }
                            s[0] += t;
                        });
                    }
                    Broadcast::LhsScalar => {
                        let x = av[0];
                        acc(a, &mut |s| {
                            let mut t = 0.0;
                            for k in 0..g.len() {
                                t += g[k] * da(x, bv[k]);
                            }
                            s[0] += t;
                        });
                        acc(b, &mut |s| {
                            for k in 0..s.len() {
                                s[k] += g[k] * db(x, bv[k]);
                            }
                        });
                    }
                }
            }
            &Op::AddRow(x, bias) => {
                let c = nodes[bias.0].value.numel();
                acc(x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b));
                acc(bias, &mut |s| {
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b * c)),
            &Op::AddScalar(x) => acc(x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b)),
            &Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = nodes[b.0].value.dims2().unwrap().1;
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |s| mm_nt_acc(g, bv, s, m, n, k));
                acc(b, &mut |s| mm_tn_acc(av, g, s, m, k, n));
            }
            &Op::Transpose(x) => {
                let (r, c) = nodes[x.0].value.dims2().unwrap();
                acc(x, &mut |s| {
                    for p in 0..r {
                        for q in 0..c {
                            s[p * c + q] += g[q * r + p];
                        }
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = val(x);
                acc(x, &mut |s| {
                    for k in 0..s.len() {
                        if xv[k] > 0.0 {
                            s[k] += g[k];
                        }
                    }
                });
            }
            &Op::Tanh(x) => acc(x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - out[k] * out[k]);
                }
            }),
            &Op::Sigmoid(x) => acc(x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            &Op::Exp(x) => acc(x, &mut |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * out[k];
                }
            }),
            &Op::Log(x) => {
                let xv = val(x);
                acc(x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / xv[k];
                    }
                });
            }
            &Op::Square(x) => {
                let xv = val(x);
                acc(x, &mut |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * 2.0 * xv[k];
                    }
                });
            }
            &Op::MaxScalar(x, floor) => {
                let xv = val(x);
                acc(x, &mut |s| {
                    for k in 0..s.len() {
                        if xv[k] > floor {
                            s[k] += g[k];
                        }
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => acc(x, &mut |s| {
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| o * len * inner + t * inner + j;
                        let mut dot = 0.0;
                        for t in 0..len {
                            dot += g[idx(t)] * out[idx(t)];
                        }
                        for t in 0..len {
                            s[idx(t)] += out[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
            }),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = nodes[gamma.0].value.numel();
                let r = rstd.len();
                let gv = val(*gamma);
                acc(*gamma, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j] += g[i * c + j];
                        }
                    }
                });
                acc(*x, &mut |s| {
                    let cf = c as f64;
                    for i in 0..r {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let d = g[i * c + j] * gv[j];
                            s[i * c + j] +=
                                rstd[i] * (d - sum_d / cf - xhat[i * c + j] * sum_dx / cf);
                        }
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |s| s.iter_mut().for_each(|a| *a += g[0])),
            &Op::Mean(x) => {
                let n = nodes[x.0].value.numel() as f64;
                acc(x, &mut |s| s.iter_mut().for_each(|a| *a += g[0] / n));
            }
            &Op::SumCols(x) => {
                let (_, c) = nodes[x.0].value.dims2().unwrap();
                acc(x, &mut |s| {
                    for (k, a) in s.iter_mut().enumerate() {
                        *a += g[k / c];
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |s| {
                        s.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b)
                    });
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = nodes[i].value.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.dims2().unwrap().1;
                    acc(p, &mut |s| {
                        for row in 0..r {
                            for q in 0..w {
                                s[row * w + q] += g[row * c + col + q];
                            }
                        }
                    });
                    col += w;
                }
            }
            &Op::SliceRows(x, start) => {
                let c = nodes[i].value.dims2().unwrap().1;
                acc(x, &mut |s| {
                    s[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b)
                });
            }
            &Op::SliceCols(x, start) => {
                let (r, len) = nodes[i].value.dims2().unwrap();
                let c = nodes[x.0].value.dims2().unwrap().1;
                acc(x, &mut |s| {
                    for row in 0..r {
                        for q in 0..len {
                            s[row * c + start + q] += g[row * len + q];
                        }
                    }
                });
            }
            &Op::Reshape(x) | &Op::StraightThrough(x) => {
                acc(x, &mut |s| s.iter_mut().zip(g).for_each(|(a, b)| *a += b))
            }
        }
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `a[m×k] · b[k×n]`; each output element is accumulated in increasing `k`.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `s[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
fn mm_nt_acc(g: &[f64], b: &[f64], s: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut t = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                t += x * y;
            }
            s[i * k + p] += t;
        }
    }
}

/// `s[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
fn mm_tn_acc(a: &[f64], g: &[f64], s: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let srow = &mut s[p * n..(p + 1) * n];
            for (sv, gv) in srow.iter_mut().zip(grow) {
                *sv += aip * gv;
            }
        }
    }
}
