//! Binary model files.
//!
//! Layout: the 8-byte magic `LEALLA1\n`, a little-endian `u64` header length,
//! a JSON header (encoder config, vocabulary, tensor manifest), then every
//! tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::corpus::Vocab;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::PROJECTION;
use crate::model::EmbeddingModel;

pub const MAGIC: &[u8; 8] = b"LEALLA1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

impl ManifestEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub vocab: Vec<String>,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payload: Vec<u8>,
}

impl Checkpoint {
    /// Every tensor of the model except training-only projection heads.
    pub fn from_model(model: &EmbeddingModel) -> Self {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let skip = format!("{PROJECTION}.");
        for (name, t) in model.store.iter().filter(|(n, _)| !n.starts_with(&skip)) {
            tensors.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend(t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()));
        }
        Self {
            header: CheckpointHeader {
                encoder: model.config.clone(),
                vocab: model.vocab.tokens().to_vec(),
                tensors,
            },
            payload,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] = rest
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Corruption("checkpoint ends inside the header length".into()))?;
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| Error::Corruption("header length overflows".into()))?;
        let rest = &rest[8..];
        if rest.len() < header_len {
            return Err(Error::Corruption(format!(
                "header announces {header_len} bytes but only {} remain",
                rest.len()
            )));
        }
        let header: CheckpointHeader = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let payload = rest[header_len..].to_vec();
        let mut expected = 0;
        for entry in &header.tensors {
            if entry.offset != expected {
                return Err(Error::Corruption(format!(
                    "tensor {} starts at byte {} but the previous tensor ends at {expected}",
                    entry.name, entry.offset
                )));
            }
            expected += entry.byte_len();
        }
        if payload.len() != expected {
            return Err(Error::Corruption(format!(
                "manifest describes {expected} payload bytes, found {}",
                payload.len()
            )));
        }
        header
            .encoder
            .validate()
            .map_err(|e| Error::Config(format!("checkpoint encoder config rejected: {e}")))?;
        Ok(Self { header, payload })
    }

    pub fn into_model(self) -> Result<EmbeddingModel> {
        let vocab = Vocab::from_tokens(self.header.vocab)?;
        let mut store = ParamStore::new();
        for entry in &self.header.tensors {
            let bytes = &self.payload[entry.offset..entry.offset + entry.byte_len()];
            let data = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::Corruption(format!("tensor {}: {e}", entry.name)))?;
            store
                .add(entry.name.clone(), t)
                .map_err(|_| Error::Corruption(format!("duplicate tensor {}", entry.name)))?;
        }
        EmbeddingModel::from_store(self.header.encoder, vocab, store)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &EmbeddingModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, Checkpoint::from_model(model).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    read_checkpoint(path)?.into_model()
}
