use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{Binder, Grads, Init, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// One forward pass: a fresh graph, lazily bound parameters, and the dropout
/// stream (absent in evaluation mode).
pub struct Fwd<'a> {
    pub g: Graph,
    pub params: Binder<'a>,
    dropout_rng: Option<Rng>,
}

impl<'a> Fwd<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool, dropout_rng: Option<Rng>) -> Self {
        let mut g = Graph::with_capacity(1024);
        // Non-finite values are caught at the loss and gradient level.
        g.set_check_finite(false);
        Fwd {
            g,
            params: Binder::new(store, trainable),
            dropout_rng,
        }
    }

    /// Evaluation pass: no gradients, no dropout.
    pub fn eval(store: &'a ParamStore) -> Self {
        Fwd::new(store, false, None)
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        self.params.get(&mut self.g, name)
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    /// Inverted dropout; identity in evaluation mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(r) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.g.value(x);
        let shape = v.shape().to_vec();
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        Ok(self.g.mul(x, m)?)
    }

    pub fn grads(&self) -> Grads {
        self.params.grads(&self.g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// `y = x·W + b` with `W` stored as `{name}.w` (in × out) and `b` as `{name}.b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, inp: usize, out: usize) -> Self {
        Linear {
            name: name.into(),
            inp,
            out,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64, w: Init, b: Init) {
        store.create(seed, &format!("{}.w", self.name), &[self.inp, self.out], w);
        store.create(seed, &format!("{}.b", self.name), &[self.out], b);
    }

    /// Fan-in uniform initialization for both weight and bias.
    pub fn init_default(&self, store: &mut ParamStore, seed: u64) {
        let a = 1.0 / (self.inp as f64).sqrt();
        self.init(store, seed, Init::Uniform(a), Init::Uniform(a));
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.p(&format!("{}.w", self.name))?;
        let b = f.p(&format!("{}.b", self.name))?;
        let y = f.g.matmul(x, w)?;
        Ok(f.g.add_row(y, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Number of hidden layers.
    pub n_layers: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            n_layers: 3,
            hidden: 256,
            dropout: 0.1,
        }
    }
}

/// Hidden layers with ReLU and dropout, then a linear output layer with
/// `out_act`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub out_act: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(name: &str, inp: usize, out: usize, cfg: &MlpConfig, out_act: Activation) -> Self {
        let mut layers = Vec::with_capacity(cfg.n_layers + 1);
        let mut d = inp;
        for i in 0..cfg.n_layers {
            layers.push(Linear::new(format!("{name}.l{i}"), d, cfg.hidden));
            d = cfg.hidden;
        }
        layers.push(Linear::new(format!("{name}.out"), d, out));
        Mlp {
            layers,
            out_act,
            dropout: cfg.dropout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        for l in &self.layers {
            l.init_default(store, seed);
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let mut h = x;
        for l in hidden {
            h = l.forward(f, h)?;
            h = f.g.relu(h);
            h = f.dropout(h, self.dropout)?;
        }
        let y = last.forward(f, h)?;
        Ok(self.out_act.apply(&mut f.g, y))
    }
}
