use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Seq2Seq};
use crate::autograd::Matrix;
use crate::corpus::{write_atomic, Vocabulary};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct StoredParam {
    name: String,
    rows: usize,
    cols: usize,
    /// Little-endian f64 values, row-major, base64.
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredCheckpoint {
    format_version: u32,
    config: ModelConfig,
    vocab: Vocabulary,
    vocab_hash: String,
    frozen: bool,
    params: Vec<StoredParam>,
}

/// A model together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2Seq,
    pub vocab: Vocabulary,
    /// Set once a degenerator finishes training.
    pub frozen: bool,
}

impl Checkpoint {
    pub fn new(model: Seq2Seq, vocab: Vocabulary) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary of {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Checkpoint {
            model,
            vocab,
            frozen: false,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let store = self.model.params();
        let params = store
            .ids()
            .map(|id| {
                let m = store.get(id);
                let bytes: Vec<u8> = m.iter().flat_map(|v| v.to_le_bytes()).collect();
                StoredParam {
                    name: store.name(id).to_string(),
                    rows: m.nrows(),
                    cols: m.ncols(),
                    data: B64.encode(bytes),
                }
            })
            .collect();
        let stored = StoredCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.model.config().clone(),
            vocab: self.vocab.clone(),
            vocab_hash: self.vocab.hash(),
            frozen: self.frozen,
            params,
        };
        let mut out = serde_json::to_vec(&stored).expect("checkpoint serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_slice(bytes)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if stored.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                stored.format_version
            )));
        }
        let actual = stored.vocab.hash();
        if actual != stored.vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: recorded {}, computed {actual}",
                stored.vocab_hash
            )));
        }
        let mut model = Seq2Seq::new(stored.config)?;
        let ids: Vec<_> = model.params().ids().collect();
        if ids.len() != stored.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                ids.len(),
                stored.params.len()
            )));
        }
        for (id, p) in ids.into_iter().zip(stored.params) {
            let store = model.params_mut();
            let expected = store.get(id).dim();
            if store.name(id) != p.name || expected != (p.rows, p.cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match stored {} {:?}",
                    store.name(id),
                    expected,
                    p.name,
                    (p.rows, p.cols)
                )));
            }
            let raw = B64
                .decode(p.data.as_bytes())
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", p.name)))?;
            if raw.len() != p.rows * p.cols * 8 {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has a truncated blob",
                    p.name
                )));
            }
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *store.get_mut(id) =
                Matrix::from_shape_vec((p.rows, p.cols), values).expect("shape checked");
        }
        Checkpoint::new(model, stored.vocab).map(|c| Checkpoint {
            frozen: stored.frozen,
            ..c
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads a checkpoint and checks it was trained on `vocab`.
    pub fn load_for(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.expect_vocab(vocab)?;
        Ok(ckpt)
    }

    pub fn expect_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let (mine, theirs) = (self.vocab.hash(), vocab.hash());
        if mine != theirs {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {mine}, expected {theirs}"
            )));
        }
        Ok(())
    }

    /// Content hash of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
