//! Model checkpoints.
//!
//! A JSON header line carries the format version, the model kind, its
//! configuration, the seed, the optimizer step count and the tensor table
//! (name and dims, in name order). The f32 little-endian row-major values of
//! every tensor follow in table order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ssmmt_core::nnet::{ParamSet, Tensor};

use super::binary::{frame, put_f32s, unframe};
use crate::error::{Context, Error, Result};
use crate::io::{read, write_atomic};

pub const VERSION: &str = "ssmmt-ckpt-1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    kind: String,
    config: serde_json::Value,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    pub params: ParamSet,
}

impl Checkpoint {
    /// Serialized bytes; values are stored as f32.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = Vec::with_capacity(4 * self.params.num_scalars());
        let mut tensors = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry { name: name.to_string(), dims: t.shape().to_vec() });
            put_f32s(&mut body, t.data().iter().map(|&x| x as f32));
        }
        let header = Header {
            version: VERSION.into(),
            kind: self.kind.clone(),
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            tensors,
        };
        frame(&header, &body)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (h, mut r) = unframe::<Header>(bytes)?;
        if h.version != VERSION {
            return Err(Error::data(format!("checkpoint version {:?}, expected {VERSION:?}", h.version)));
        }
        let mut params = ParamSet::new();
        for e in h.tensors {
            let n = e.dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::data("tensor too large"))?;
            let data = r.f32s(n)?.into_iter().map(f64::from).collect();
            if params.contains(&e.name) {
                return Err(Error::data(format!("duplicate tensor {}", e.name)));
            }
            params.insert(e.name, Tensor::new(&e.dims, data)?);
        }
        r.finish()?;
        Ok(Self { kind: h.kind, config: h.config, seed: h.seed, step: h.step, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read(path)?).at(path)
    }

    /// Loads and checks the model kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::data(format!("checkpoint holds a {} model, expected {kind}", c.kind)).at(path));
        }
        Ok(c)
    }

    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::data(format!("checkpoint config: {e}")))
    }
}
