//! One JSON header line followed by a little-endian f32 payload.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::tensor::{Matrix, ParamStore};

const FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint {path}: {message}")]
    Malformed { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorEntry>,
}

impl Model<f32> {
    pub fn to_checkpoint_bytes(&self, vocab_hash: &str) -> Vec<u8> {
        let mut offset = 0;
        let tensors = self
            .params
            .names()
            .iter()
            .zip(self.params.values())
            .map(|(name, m)| {
                let e = TensorEntry { name: name.clone(), shape: [m.rows(), m.cols()], offset };
                offset += m.len() * 4;
                e
            })
            .collect();
        let header = Header {
            format: FORMAT,
            config: self.config.clone(),
            vocab_hash: vocab_hash.to_string(),
            tensors,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(offset);
        for m in self.params.values() {
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_checkpoint_bytes(vocab_hash)).map_err(io)
    }

    /// Loads a checkpoint and returns it with the stored vocabulary hash.
    pub fn load(path: &Path) -> Result<(Self, String), CheckpointError> {
        let shown = path.display().to_string();
        let io = |source| CheckpointError::Io { path: shown.clone(), source };
        let bad = |message: String| CheckpointError::Malformed { path: shown.clone(), message };
        let mut reader = BufReader::new(fs::File::open(path).map_err(io)?);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(io)?;
        let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| bad(e.to_string()))?;
        if header.format != FORMAT {
            return Err(bad(format!("format {} (expected {FORMAT})", header.format)));
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload).map_err(io)?;
        let mut store = ParamStore::new();
        for t in &header.tensors {
            let n = t.shape[0] * t.shape[1];
            let bytes = payload
                .get(t.offset..t.offset + n * 4)
                .ok_or_else(|| bad(format!("tensor {} runs past the payload", t.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let m = Matrix::from_vec(t.shape[0], t.shape[1], data).map_err(|e| bad(e.to_string()))?;
            store.add(t.name.clone(), m);
        }
        Ok((Model::from_params(header.config, store)?, header.vocab_hash))
    }
}
