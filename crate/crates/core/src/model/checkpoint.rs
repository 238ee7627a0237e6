//! Single-file checkpoints: `HYDN`, a `u32` version, a length-prefixed
//! JSON header, then length-prefixed named little-endian `f64` tensors.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ModelError, Result};
use crate::numerics::{Rng, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"HYDN";

/// SHA-256 of the config's JSON text.
pub fn config_hash(config: &ModelConfig) -> String {
    let text = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    step: u64,
    rng: Option<Rng>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub rng: Option<Rng>,
    /// Free-form run metadata (vocabulary, task heads, schedule position).
    pub extra: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt("unexpected end of file"))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, rng: Option<Rng>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            step,
            rng,
            extra: serde_json::Value::Null,
            tensors: model
                .named_parameters()
                .into_iter()
                .map(|(n, t)| (n, t.detach()))
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, keyed by the remainder.
    pub fn with_prefix(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| {
                n.strip_prefix(prefix)
                    .map(|rest| (rest.to_string(), t.clone()))
            })
            .collect()
    }

    /// Rebuilds the model and loads every parameter by name.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::build(&self.config, &mut Rng::new(0))?;
        for (name, p) in model.named_parameters_mut() {
            let t = self
                .tensor(&name)
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if t.shape() != p.shape() {
                return Err(corrupt(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            *p = t.detach_param();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            step: self.step,
            rng: self.rng.clone(),
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; with `expected`, refuses one built for a
    /// different configuration.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| corrupt(format!("header: {e}")))?;
        if config_hash(&header.config) != header.config_hash {
            return Err(corrupt("stored config hash does not match stored config"));
        }
        if let Some(cfg) = expected {
            let want = config_hash(cfg);
            if want != header.config_hash {
                return Err(ModelError::ConfigMismatch {
                    expected: want,
                    found: header.config_hash,
                });
            }
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| corrupt("tensor name is not utf-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| corrupt("tensor too large"))?;
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| corrupt("tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.at != bytes.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            rng: header.rng,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| ModelError::Io(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes, expected)
    }
}
