//! Binary checkpoint: magic, format version, a JSON header (config,
//! vocabulary hash, tensor directory) and little-endian `f32` blobs in
//! declaration order. The fixed positional table is regenerated on load
//! rather than stored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{init_classifier, init_weights, ParamKind, Weights};
use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BRLTMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub weights: Weights<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn stored_entries(w: &Weights<Tensor>) -> Vec<Entry> {
    let mut out = Vec::new();
    w.visit(&mut |name, kind, t| {
        if kind != ParamKind::Fixed {
            out.push(Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            });
        }
    });
    out
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocabulary) -> Self {
        Self {
            config: model.config.clone(),
            vocab_hash: vocab.content_hash(),
            weights: model.weights.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensors: stored_entries(&self.weights),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.weights.count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        self.weights.visit(&mut |_, kind, t| {
            if kind != ParamKind::Fixed {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("missing checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(16..16 + header_len).ok_or_else(|| fmt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        header.config.validate()?;

        let has_head = header.tensors.iter().any(|e| e.name.starts_with("classifier."));
        let mut weights = init_weights(&header.config, 0, has_head)?;
        let expected = stored_entries(&weights);
        if expected != header.tensors {
            return Err(fmt("tensor directory does not match the configuration"));
        }
        let body = &bytes[16 + header_len..];
        let floats: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() != 4 * floats {
            return Err(Error::Format(format!(
                "expected {} bytes of tensor data, found {}",
                4 * floats,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        weights.visit_mut(&mut |_, kind, t| {
            if kind != ParamKind::Fixed {
                for v in t.data_mut() {
                    *v = values.next().unwrap();
                }
            }
        });
        Ok(Self {
            config: header.config,
            vocab_hash: header.vocab_hash,
            weights,
        })
    }

    /// Fails unless the checkpoint was trained on exactly this vocabulary.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let hash = vocab.content_hash();
        if hash != self.vocab_hash {
            return Err(Error::Incompatible(format!(
                "vocabulary hash {} does not match checkpoint {}",
                hash, self.vocab_hash
            )));
        }
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Incompatible(format!(
                "vocabulary has {} ids, checkpoint expects {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn has_classifier(&self) -> bool {
        self.weights.classifier.is_some()
    }

    /// Model ready for fine-tuning; a missing head is initialised from `seed`.
    pub fn into_finetune_model(self, seed: u64) -> Model {
        let mut weights = self.weights;
        if weights.classifier.is_none() {
            weights.classifier = Some(init_classifier(self.config.hidden_size, seed));
        }
        Model {
            config: self.config,
            weights,
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            config: self.config,
            weights: self.weights,
        }
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; with `vocab` given, refuses a mismatched vocabulary.
pub fn load_checkpoint(path: impl AsRef<Path>, vocab: Option<&Vocabulary>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let checkpoint = Checkpoint::from_bytes(&bytes)?;
    if let Some(v) = vocab {
        checkpoint.check_vocab(v)?;
    }
    Ok(checkpoint)
}
