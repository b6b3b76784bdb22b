//! Versioned parameter container.
//!
//! Layout: magic `BSCK`, u32 LE format version, u32 LE header length, a JSON
//! header, then every tensor's values back to back as little-endian floats of
//! the stored precision, in enumeration order. The header carries the model
//! configuration, its SHA-256 fingerprint, training metadata and the entry
//! manifest (name, shape, byte offset into the data section).

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsformer::InitMode;
use crate::error::{ModelError, Result};
use crate::nn::{Params, Precision};
use crate::pipeline::{BSoNet, ModelConfig};

pub const MAGIC: &[u8; 4] = b"BSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    fingerprint: String,
    model: ModelConfig,
    precision: Precision,
    epoch: usize,
    best_loss: Option<f64>,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub precision: Precision,
    /// Epoch (1-based) the parameters were taken from; 0 for untrained.
    pub epoch: usize,
    pub best_loss: Option<f64>,
    /// Named parameter values in enumeration order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Hex SHA-256 of the canonical JSON form of the model configuration.
pub fn fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model(model: &BSoNet, epoch: usize, best_loss: Option<f64>) -> Result<Self> {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|p| {
                let t = p.var.as_tensor();
                let values = t
                    .flatten_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_vec1::<f64>()?;
                Ok((p.name, t.dims().to_vec(), values))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model: model.cfg.clone(),
            precision: model.precision,
            epoch,
            best_loss,
            tensors,
        })
    }

    /// Rebuilds the network and loads every parameter, checking names and shapes.
    pub fn to_model(&self) -> Result<BSoNet> {
        let model = BSoNet::init(&self.model, self.precision, InitMode::Standard)?;
        let params = model.named_params();
        if params.len() != self.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors, found {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for (p, (name, shape, values)) in params.iter().zip(&self.tensors) {
            if &p.name != name || p.var.dims() != shape.as_slice() {
                return Err(bad(format!(
                    "entry {name} {shape:?} does not match parameter {} {:?}",
                    p.name,
                    p.var.dims()
                )));
            }
            let t = Tensor::from_vec(values.clone(), shape.as_slice(), &Device::Cpu)?
                .to_dtype(self.precision.dtype())?;
            p.var.set(&t)?;
        }
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let width = self.precision.byte_width();
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, shape, values)| {
                let e = Entry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += (values.len() * width) as u64;
                e
            })
            .collect();
        let header = Header {
            format_version: FORMAT_VERSION,
            fingerprint: fingerprint(&self.model),
            model: self.model.clone(),
            precision: self.precision,
            epoch: self.epoch,
            best_loss: self.best_loss,
            entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, values) in &self.tensors {
            for &v in values {
                match self.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let data_start = 12usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[12..data_start]).map_err(|e| bad(e.to_string()))?;
        if header.format_version != version {
            return Err(bad("header version disagrees with preamble"));
        }
        if fingerprint(&header.model) != header.fingerprint {
            return Err(ModelError::FingerprintMismatch);
        }
        let data = &bytes[data_start..];
        let width = header.precision.byte_width();
        let mut tensors = Vec::with_capacity(header.entries.len());
        let mut expected_offset = 0usize;
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            if start != expected_offset {
                return Err(bad(format!("entry {} has offset {start}", e.name)));
            }
            let end = start + n * width;
            if end > data.len() {
                return Err(bad(format!("entry {} runs past end of file", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(width)
                .map(|c| match header.precision {
                    Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                    Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
                })
                .collect();
            tensors.push((e.name, e.shape, values));
            expected_offset = end;
        }
        if expected_offset != data.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(Self {
            model: header.model,
            precision: header.precision,
            epoch: header.epoch,
            best_loss: header.best_loss,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Loads and requires the stored configuration to match `expected`.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if fingerprint(&ck.model) != fingerprint(expected) {
            return Err(ModelError::FingerprintMismatch);
        }
        Ok(ck)
    }
}
