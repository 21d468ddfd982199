//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"CNCK" | version: u32 | meta_len: u32 | meta: UTF-8 JSON
//! then per tensor: name_len: u32 | name | rank: u32 | dims: u32 * rank
//!                  | dtype: u8 (0 = f32) | values: f32 * numel
//! ```
//!
//! Model parameters come first in name order, then Adam moments under
//! `opt.m.<name>` and `opt.v.<name>`. The JSON holds the model config, the
//! optimizer scalars, the step, the schedule position and the tensor count.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::schedule::SchedulePosition;
use crate::error::{Error, Result};
use crate::model::{CrossModalModel, ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub schedule: SchedulePosition,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CrossModalModel,
    pub optimizer: Adam,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamScalars {
    t: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    adam: AdamScalars,
    step: u64,
    schedule: SchedulePosition,
    tensor_count: u32,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid("checkpoint", format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    out.push(DTYPE_F32);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                what: "checkpoint",
                detail: format!("{what} needs {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            });
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|_| Error::Format {
                what: "checkpoint",
                detail: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = self.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| self.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = self.take(1, "dtype")?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("tensor `{name}` has unknown dtype tag {dtype}"),
            });
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: format!("tensor `{name}` is too large"),
            })?;
        let values = self
            .take(numel, &format!("values of `{name}`"))?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, dims, values))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let header = Header {
            model: self.model.config().clone(),
            adam: AdamScalars {
                t: self.optimizer.t,
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: self.optimizer.eps,
            },
            step: self.meta.step,
            schedule: self.meta.schedule,
            tensor_count: u32::try_from(3 * params.len()).expect("parameter count fits in u32"),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 12 * params.element_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        for (name, t) in params.iter() {
            put_tensor(&mut out, name, t.shape(), t.data())?;
        }
        for (prefix, moments) in [(M_PREFIX, &self.optimizer.m), (V_PREFIX, &self.optimizer.v)] {
            for (name, t) in params.iter() {
                let values = moments.get(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
                put_tensor(&mut out, &format!("{prefix}{name}"), t.shape(), values)?;
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint into the architecture its header describes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, None)
    }

    /// Parses a checkpoint, refusing one whose architecture differs from `expected`.
    pub fn from_bytes_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        Self::parse(bytes, Some(expected))
    }

    fn parse(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic").map_err(|_| Error::BadMagic {
            what: "checkpoint",
            expected: "CNCK".into(),
            found: String::from_utf8_lossy(bytes).into_owned(),
        })?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                what: "checkpoint",
                expected: "CNCK".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u32("version")?;
        if version > CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
        if let Some(want) = expected {
            if want.skip_mode != header.model.skip_mode {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint skip_mode is {:?}, requested {:?}",
                    header.model.skip_mode, want.skip_mode
                )));
            }
            if want != &header.model {
                return Err(Error::ConfigMismatch(format!(
                    "checkpoint model {:?} differs from requested {:?}",
                    header.model, want
                )));
            }
        }
        let registry: CrossModalModel = CrossModalModel::new(header.model.clone())?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..header.tensor_count {
            let (name, dims, values) = r.tensor()?;
            let (base, slot) = if let Some(b) = name.strip_prefix(M_PREFIX) {
                (b.to_string(), Some(&mut m))
            } else if let Some(b) = name.strip_prefix(V_PREFIX) {
                (b.to_string(), Some(&mut v))
            } else {
                (name.clone(), None)
            };
            let expect = registry
                .params
                .get(&base)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if expect.shape() != dims.as_slice() {
                return Err(Error::DimMismatch {
                    name,
                    expected: expect.shape().to_vec(),
                    found: dims,
                });
            }
            let duplicate = match slot {
                Some(map) => map.insert(base, values).is_some(),
                None => params.insert(base, Tensor::from_vec(&dims, values)?).is_some(),
            };
            if duplicate {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("tensor `{name}` appears twice"),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        if m.len() != registry.params.len() || v.len() != registry.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: "optimizer moments do not cover every parameter".into(),
            });
        }
        let model = CrossModalModel::with_params(header.model, ParamStore::from_map(params))?;
        let optimizer = Adam {
            learning_rate: header.adam.learning_rate,
            beta1: header.adam.beta1,
            beta2: header.adam.beta2,
            eps: header.adam.eps,
            t: header.adam.t,
            m,
            v,
        };
        Ok(Checkpoint {
            model,
            optimizer,
            meta: CheckpointMeta {
                step: header.step,
                schedule: header.schedule,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes_for(&bytes, expected)
    }
}
