use serde::{Deserialize, Serialize};

use super::layers::{Fwd, Linear};
use super::params::{Init, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    /// Context window in timesteps (each timestep spans several tokens).
    pub context_length: usize,
    pub dropout: f64,
    pub causal: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_layers: 3,
            n_heads: 1,
            embed_dim: 128,
            context_length: 20,
            dropout: 0.1,
            causal: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.context_length == 0 {
            return Err(Error::Config("context_length must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Keys and values of already-processed tokens, per layer. Tied to the graph
/// of the [`Fwd`] that filled it.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    layers: Vec<Option<(Var, Var)>>,
    len: usize,
}

impl KvCache {
    pub fn new() -> Self {
        KvCache::default()
    }

    /// Number of tokens processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Pre-norm decoder stack: `x + Attn(LN(x))`, then `x + MLP(LN(x))`, with a
/// final layer norm. Position information is the caller's job.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub name: String,
    pub cfg: TransformerConfig,
    /// Longest token sequence accepted.
    pub max_tokens: usize,
}

struct Block {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    fc1: Linear,
    fc2: Linear,
    ln1: String,
    ln2: String,
}

impl Transformer {
    pub fn new(name: impl Into<String>, cfg: TransformerConfig, max_tokens: usize) -> Self {
        Transformer {
            name: name.into(),
            cfg,
            max_tokens,
        }
    }

    fn block(&self, l: usize) -> Block {
        let d = self.cfg.embed_dim;
        let p = format!("{}.h{l}", self.name);
        Block {
            q: Linear::new(format!("{p}.attn.q"), d, d),
            k: Linear::new(format!("{p}.attn.k"), d, d),
            v: Linear::new(format!("{p}.attn.v"), d, d),
            o: Linear::new(format!("{p}.attn.o"), d, d),
            fc1: Linear::new(format!("{p}.mlp.fc1"), d, 4 * d),
            fc2: Linear::new(format!("{p}.mlp.fc2"), 4 * d, d),
            ln1: format!("{p}.ln1"),
            ln2: format!("{p}.ln2"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let d = self.cfg.embed_dim;
        let ln = |store: &mut ParamStore, name: &str| {
            store.create(seed, &format!("{name}.g"), &[d], Init::Ones);
            store.create(seed, &format!("{name}.b"), &[d], Init::Zeros);
        };
        for l in 0..self.cfg.n_layers {
            let b = self.block(l);
            for lin in [&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2] {
                lin.init(store, seed, Init::Normal(0.02), Init::Zeros);
            }
            ln(store, &b.ln1);
            ln(store, &b.ln2);
        }
        ln(store, &format!("{}.ln_f", self.name));
    }

    fn layer_norm(&self, f: &mut Fwd, name: &str, x: Var) -> Result<Var> {
        let g = f.p(&format!("{name}.g"))?;
        let b = f.p(&format!("{name}.b"))?;
        Ok(f.g.layer_norm(x, g, b)?)
    }

    /// Full forward over `x` (T × d) with an empty cache.
    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        self.forward_chunk(f, x, &mut KvCache::new())
    }

    /// Processes the next `c` tokens given the cached earlier ones. Feeding a
    /// sequence in chunks gives the same values as one full pass.
    pub fn forward_chunk(&self, f: &mut Fwd, x: Var, cache: &mut KvCache) -> Result<Var> {
        let (c, d) = f.g.value(x).dims2().ok_or_else(|| {
            Error::Policy(format!("transformer input must be a matrix, got {:?}", f.g.value(x).shape()))
        })?;
        if d != self.cfg.embed_dim {
            return Err(Error::Policy(format!(
                "transformer input width {d}, expected {}",
                self.cfg.embed_dim
            )));
        }
        let p0 = cache.len;
        if p0 + c > self.max_tokens {
            return Err(Error::Policy(format!(
                "sequence of {} tokens exceeds the maximum {}",
                p0 + c,
                self.max_tokens
            )));
        }
        cache.layers.resize(self.cfg.n_layers, None);
        let heads = self.cfg.n_heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let total = p0 + c;
        let mask = if self.cfg.causal && c > 1 {
            let mut m = vec![0.0; c * total];
            for i in 0..c {
                for j in (p0 + i + 1)..total {
                    m[i * total + j] = f64::NEG_INFINITY;
                }
            }
            Some(f.g.constant(Tensor::new(vec![c, total], m)?))
        } else {
            None
        };

        let mut h = x;
        for l in 0..self.cfg.n_layers {
            let b = self.block(l);
            let n1 = self.layer_norm(f, &b.ln1, h)?;
            let q = b.q.forward(f, n1)?;
            let k = b.k.forward(f, n1)?;
            let v = b.v.forward(f, n1)?;
            let (kk, vv) = match cache.layers[l] {
                Some((pk, pv)) => (f.g.concat_rows(&[pk, k])?, f.g.concat_rows(&[pv, v])?),
                None => (k, v),
            };
            cache.layers[l] = Some((kk, vv));
            let mut outs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let (qh, kh, vh) = if heads == 1 {
                    (q, kk, vv)
                } else {
                    (
                        f.g.slice_cols(q, hi * hd, hd)?,
                        f.g.slice_cols(kk, hi * hd, hd)?,
                        f.g.slice_cols(vv, hi * hd, hd)?,
                    )
                };
                let kt = f.g.transpose(kh)?;
                let logits = f.g.matmul(qh, kt)?;
                let mut logits = f.g.scale(logits, scale);
                if let Some(m) = mask {
                    logits = f.g.add(logits, m)?;
                }
                let w = f.g.softmax(logits, 1)?;
                let w = f.dropout(w, self.cfg.dropout)?;
                outs.push(f.g.matmul(w, vh)?);
            }
            let att = if heads == 1 {
                outs[0]
            } else {
                f.g.concat_cols(&outs)?
            };
            let att = b.o.forward(f, att)?;
            h = f.g.add(h, att)?;

            let n2 = self.layer_norm(f, &b.ln2, h)?;
            let m = b.fc1.forward(f, n2)?;
            let m = f.g.relu(m);
            let m = f.dropout(m, self.cfg.dropout)?;
            let m = b.fc2.forward(f, m)?;
            h = f.g.add(h, m)?;
        }
        cache.len = total;
        self.layer_norm(f, &format!("{}.ln_f", self.name), h)
    }
}
