//! Self-describing checkpoint container: a length-prefixed JSON header
//! (version, encoder config, tensor manifest) followed by little-endian raw
//! tensor bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload region following the header.
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

/// Named parameter tensors of a model plus its config header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(config: &EncoderConfig, params: &EncoderParams) -> Self {
        Self {
            config: config.clone(),
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<EncoderParams> {
        EncoderParams::from_named(&self.config, self.tensors.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, tensor) in &self.tensors {
            let offset = payload.len() as u64;
            for value in tensor.data() {
                payload.extend_from_slice(&value.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                dtype: "f64".to_string(),
                offset,
                byte_len: payload.len() as u64 - offset,
            });
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 {
            return Err(Error::Manifest("file too short for header length".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::Manifest("truncated header".into()));
        }
        let header_bytes = &bytes[8..8 + header_len];
        // Check the version before insisting on the full header schema.
        let value: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Manifest(format!("header parse error: {e}")))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Manifest("header has no version field".into()))?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Manifest(format!("header parse error: {e}")))?;

        let payload = &bytes[8 + header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            if entry.dtype != "f64" {
                return Err(Error::Manifest(format!(
                    "tensor {}: unsupported dtype {}",
                    entry.name, entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            if entry.byte_len as usize != count * 8 {
                return Err(Error::Manifest(format!(
                    "tensor {}: shape {:?} implies {} bytes, manifest says {}",
                    entry.name,
                    entry.shape,
                    count * 8,
                    entry.byte_len
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.byte_len as usize;
            if end > payload.len() {
                return Err(Error::Manifest(format!(
                    "tensor {}: payload truncated ({} bytes needed, {} present)",
                    entry.name,
                    end,
                    payload.len()
                )));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tensor {}", entry.name)));
            }
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        Ok(Self {
            config: header.config,
            tensors,
        })
    }
}

/// Persist encoder parameters with their config.
pub fn save_checkpoint(
    params: &EncoderParams,
    config: &EncoderConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    Checkpoint::from_params(config, params).save(path)
}

/// Load parameters and config back; bit-exact inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderParams, EncoderConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let params = ckpt.to_params()?;
    Ok((params, ckpt.config))
}
