//! `satseg-ckpt-v1` checkpoint files.
//!
//! Layout: an 8-byte little-endian manifest length, the JSON manifest, then
//! the tensor payload as little-endian `f32`. The manifest lists every tensor
//! with its shape and byte offset into the payload, plus the model config,
//! adapter description and optional tokenizer, punctuation set and
//! decoding threshold.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attach_lora, LoraSpec, ModelConfig, ModelParams};
use crate::tokenize::{PunctuationSet, Tokenizer};

pub const FORMAT_TAG: &str = "satseg-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    config: ModelConfig,
    #[serde(default)]
    lora: Option<LoraSpec>,
    lookahead_remainder: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    tokenizer: Option<String>,
    #[serde(default)]
    punctuation: Option<PunctuationSet>,
    #[serde(default)]
    threshold: Option<f64>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
}

/// A model together with everything needed to run it on raw text.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub tokenizer: Option<Tokenizer>,
    pub punctuation: Option<PunctuationSet>,
    pub threshold: Option<f64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            tokenizer: None,
            punctuation: None,
            threshold: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        for (name, t) in self.params.tensors() {
            let offset = payload.len();
            for &v in t.iter() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape: [t.nrows(), t.ncols()],
                offset,
                bytes: payload.len() - offset,
            });
        }
        let manifest = Manifest {
            format: FORMAT_TAG.to_string(),
            dtype: "f32".to_string(),
            config: self.params.config.clone(),
            lora: self.params.lora.clone(),
            lookahead_remainder: self.params.lookahead_remainder(),
            tensors,
            tokenizer: self
                .tokenizer
                .as_ref()
                .map(Tokenizer::to_json)
                .transpose()?,
            punctuation: self.punctuation.clone(),
            threshold: self.threshold,
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("file too short"))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header = bytes
            .get(8..8usize.saturating_add(header_len))
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(header)?;
        if manifest.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "unsupported format tag `{}`",
                manifest.format
            )));
        }
        if manifest.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "unsupported dtype `{}`",
                manifest.dtype
            )));
        }
        let payload = &bytes[8 + header_len..];

        manifest.config.validate()?;
        let mut params = ModelParams::init(manifest.config.clone(), 0)?;
        if let Some(spec) = &manifest.lora {
            params = attach_lora(&params, spec, 0)?;
        }
        let entries: BTreeMap<&str, &TensorEntry> = manifest
            .tensors
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        if entries.len() != params.tensors().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.tensors().len(),
                entries.len()
            )));
        }
        for (name, t) in params.tensors_mut() {
            let e = entries
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if e.shape != [t.nrows(), t.ncols()] || e.bytes != t.len() * 4 {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            let raw = payload
                .get(e.offset..e.offset + e.bytes)
                .ok_or_else(|| Error::Checkpoint(format!("payload too short for `{name}`")))?;
            for (dst, chunk) in t.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
            }
        }
        Ok(Checkpoint {
            params,
            tokenizer: manifest
                .tokenizer
                .as_deref()
                .map(Tokenizer::from_json)
                .transpose()?,
            punctuation: manifest.punctuation,
            threshold: manifest.threshold,
            metadata: manifest.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Rounds every tensor to `f32`, matching what a save/load cycle produces.
pub fn round_to_f32(params: &ModelParams) -> ModelParams {
    let mut out = params.clone();
    for (_, t) in out.tensors_mut() {
        t.mapv_inplace(|v| v as f32 as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LoraSpec;

    fn params() -> ModelParams {
        let cfg = ModelConfig::new(9, 8, 2, 2, 16, 12, Some(4), 3).unwrap();
        ModelParams::init(cfg, 7).unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_values() {
        let p = attach_lora(&params(), &LoraSpec::new(2, 4.0), 1).unwrap();
        let mut ck = Checkpoint::new(p.clone());
        ck.threshold = Some(0.25);
        ck.metadata.insert("stage".into(), serde_json::json!("sm"));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.params, round_to_f32(&p));
        assert_eq!(back.threshold, Some(0.25));
        assert_eq!(back.metadata["stage"], "sm");
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn manifest_carries_format_tag() {
        let bytes = Checkpoint::new(params()).to_bytes().unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(manifest["format"], FORMAT_TAG);
        assert_eq!(manifest["dtype"], "f32");
        assert_eq!(manifest["tensors"][0]["name"], "tok_emb");
        assert_eq!(manifest["tensors"][0]["offset"], 0);
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(Checkpoint::from_bytes(&[1, 2, 3]).is_err());
        let mut bytes = Checkpoint::new(params()).to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bytes = Checkpoint::new(params()).to_bytes().unwrap();
        let pos = bytes.windows(6).position(|w| w == b"satseg").unwrap();
        bytes[pos] = b'x';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
