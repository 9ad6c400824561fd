//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes       | content                                          |
//! |-------------|--------------------------------------------------|
//! | 0..8        | magic `GLYMLMCK`                                 |
//! | 8..12       | `u32` format version (currently 1)               |
//! | 12..20      | `u64` header length `H`                          |
//! | 20..20+H    | UTF-8 JSON [`CheckpointHeader`]                  |
//! | 20+H..      | tensor payload, element type `header.dtype`      |
//!
//! Each [`TensorEntry`] gives a tensor's name, shape and element offset into
//! the payload; tensors are row-major and stored back to back in the
//! model's canonical tensor order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::encoder::{EncoderConfig, EncoderModel, Head, LabelSpaces, ModelError, Scalar};
use crate::files::write_atomic;
use crate::trainer::{RunConfig, Stage};

pub const MAGIC: &[u8; 8] = b"GLYMLMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("vocabulary fingerprint mismatch: header {header}, embedded vocabulary {actual}")]
    Fingerprint { header: String, actual: String },
    #[error("unsupported element type {0:?}")]
    Dtype(String),
    #[error("tensor directory does not match the configuration: {0}")]
    Directory(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the payload.
    pub offset: usize,
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub run: Option<RunConfig>,
    pub stages: Vec<Stage>,
    pub steps: u64,
    /// Vocabulary indices seen in training text, ascending.
    pub seen_tokens: Vec<usize>,
    pub finetuned_heads: Vec<Head>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub encoder: EncoderConfig,
    pub labels: LabelSpaces,
    pub vocab_fingerprint: String,
    pub vocab: Vocabulary,
    pub meta: StageMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EncoderModel<f32>,
    pub vocab: Vocabulary,
    pub meta: StageMeta,
}

impl Checkpoint {
    pub fn new(model: EncoderModel<f32>, vocab: Vocabulary, meta: StageMeta) -> Result<Self, CheckpointError> {
        if model.vocab_size != vocab.len() {
            return Err(CheckpointError::Directory(format!(
                "model has {} token rows, vocabulary {} entries",
                model.vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint { model, vocab, meta })
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0;
        let tensors = self
            .model
            .params
            .slices()
            .into_iter()
            .map(|(info, data)| {
                let e = TensorEntry {
                    name: info.name,
                    shape: info.shape,
                    offset,
                };
                offset += data.len();
                e
            })
            .collect();
        CheckpointHeader {
            dtype: f32::NAME.into(),
            encoder: self.model.config.clone(),
            labels: self.model.labels,
            vocab_fingerprint: self.vocab.fingerprint(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let count = self.model.parameter_count();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, data) in self.model.params.slices() {
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(if bytes.starts_with(MAGIC) || bytes.len() < 8 {
                CheckpointError::Truncated
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).ok_or(CheckpointError::Truncated)?;
        let header: CheckpointHeader =
            serde_json::from_slice(bytes.get(20..header_end).ok_or(CheckpointError::Truncated)?)?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(CheckpointError::Dtype(other.into())),
        };
        let actual = header.vocab.fingerprint();
        if actual != header.vocab_fingerprint {
            return Err(CheckpointError::Fingerprint {
                header: header.vocab_fingerprint,
                actual,
            });
        }
        let mut model = EncoderModel::<f32>::init(&header.encoder, header.vocab.len(), header.labels)?;
        let expected: Vec<_> = model.params.slices().into_iter().map(|(i, d)| (i.name, i.shape, d.len())).collect();
        if expected.len() != header.tensors.len() {
            return Err(CheckpointError::Directory("tensor count".into()));
        }
        let payload = &bytes[header_end..];
        for ((name, shape, len), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name || *shape != entry.shape {
                return Err(CheckpointError::Directory(format!("tensor {}", entry.name)));
            }
            let end = (entry.offset + len) * width;
            if payload.len() < end {
                return Err(CheckpointError::Truncated);
            }
        }
        for ((_, dst), entry) in model.params.slices_mut().into_iter().zip(&header.tensors) {
            let src = &payload[entry.offset * width..];
            for (i, x) in dst.iter_mut().enumerate() {
                let b = &src[i * width..(i + 1) * width];
                *x = if width == 4 {
                    f32::from_le_bytes(b.try_into().expect("4 bytes"))
                } else {
                    f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32
                };
            }
        }
        Ok(Checkpoint {
            model,
            vocab: header.vocab,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
