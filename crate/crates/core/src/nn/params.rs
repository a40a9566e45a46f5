use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-a, a]`.
    Uniform(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Creates `name` with a deterministic fill derived from `seed` and the
    /// name alone, so adding or removing other parameters never changes it.
    pub fn create(&mut self, seed: u64, name: &str, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let mut r = rng::stream(seed, &[rng::tag::INIT, name_hash(name)]);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(sd) => {
                let d = Normal::new(0.0, sd).expect("finite sd");
                (0..n).map(|_| d.sample(&mut r)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| r.random_range(-a..=a)).collect(),
        };
        self.params
            .insert(name.to_string(), Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

fn name_hash(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Gradients keyed by parameter name. Missing entries are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    pub map: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    /// `self += other`, in name order.
    pub fn accumulate(&mut self, other: &Grads) {
        for (k, v) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => acc.iter_mut().zip(v).for_each(|(a, b)| *a += b),
                None => {
                    self.map.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.map.values_mut() {
            v.iter_mut().for_each(|a| *a *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|v| v.iter())
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, v)| v.iter().any(|a| !a.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Binds parameters onto a graph as leaves, on first use.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<&'a str, Var>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            vars: BTreeMap::new(),
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Policy(format!("missing parameter {name}")))?;
        let v = g.leaf(t.clone(), self.trainable);
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter after `Graph::backward`.
    pub fn grads(&self, g: &Graph) -> Grads {
        let map = self
            .vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|d| (k.to_string(), d.to_vec())))
            .collect();
        Grads { map }
    }
}
