//! Checkpoint files: one JSON document holding the model configuration and
//! every parameter as `{shape, data}` where `data` is base64 of the
//! little-endian `f64` bytes. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub format_version: u32,
    pub config: C,
    pub params: BTreeMap<String, EncodedTensor>,
}

pub fn encode_tensor(t: &Tensor) -> EncodedTensor {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    EncodedTensor {
        shape: t.shape().to_vec(),
        data: STANDARD.encode(bytes),
    }
}

pub fn decode_tensor(name: &str, e: &EncodedTensor) -> Result<Tensor> {
    let bytes = STANDARD
        .decode(&e.data)
        .map_err(|err| Error::Policy(format!("parameter {name}: bad base64: {err}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Policy(format!(
            "parameter {name}: payload of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(e.shape.clone(), data).map_err(|err| Error::Policy(format!("parameter {name}: {err}")))
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(config: C, params: &ParamStore) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config,
            params: params.iter().map(|(k, t)| (k.clone(), encode_tensor(t))).collect(),
        }
    }

    pub fn params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (k, e) in &self.params {
            store.insert(k.clone(), decode_tensor(k, e)?);
        }
        Ok(store)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(s).map_err(|e| Error::Policy(format!("checkpoint: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Policy(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
