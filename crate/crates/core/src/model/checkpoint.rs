use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::slash::Model;
use super::ModelConfig;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SLASHCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is incompatible with this build (expects {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint does not fit: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// Named tensors plus free-form JSON metadata.
///
/// On disk: 8-byte magic, little-endian `u32` version, little-endian `u64`
/// header length, the JSON header, then every tensor's entries in header
/// order as little-endian floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn read_header(bytes: &[u8]) -> Result<(Header, usize), CheckpointError> {
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header = serde_json::from_slice(body).map_err(|e| CheckpointError::Format(e.to_string()))?;
    Ok((header, hlen))
}

/// Element type (`"f32"` or `"f64"`) a checkpoint file was written with.
pub fn checkpoint_dtype(path: &Path) -> Result<String, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(read_header(&bytes)?.0.dtype)
}

impl<T: Real> Checkpoint<T> {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            dtype: T::DTYPE.into(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorHeader {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (header, hlen) = read_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(CheckpointError::Format(format!(
                "stored as {}, read as {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut offset = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let raw = bytes
                .get(offset..offset + n * T::BYTES)
                .ok_or_else(|| CheckpointError::Format(format!("tensor {} is truncated", th.name)))?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let t = Tensor::new(&th.shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
            tensors.push((th.name, t));
            offset += n * T::BYTES;
        }
        if offset != bytes.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Real> Model<T> {
    /// Writes the config under `meta.model` and each parameter as
    /// `param/<name>`.
    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint<T>) {
        if let Value::Object(map) = &mut ckpt.meta {
            map.insert("model".into(), serde_json::to_value(&self.config).expect("config serializes"));
        }
        for id in self.params.ids() {
            ckpt.push(format!("{PARAM_PREFIX}{}", self.params.name(id)), self.params.get(id).clone());
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut c = Checkpoint::new(Value::Object(Default::default()));
        self.write_checkpoint(&mut c);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self, CheckpointError> {
        let config: ModelConfig = ckpt
            .meta
            .get("model")
            .ok_or_else(|| CheckpointError::Mismatch("no model config".into()))
            .and_then(|v| serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Format(e.to_string())))?;
        let mut model = Model::new(config, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = format!("{PARAM_PREFIX}{}", model.params.name(id));
            let t = ckpt
                .get(&name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing {name}")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
