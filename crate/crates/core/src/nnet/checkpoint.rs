//! Versioned JSON checkpoint container. Weight arrays are stored as base64 of
//! little-endian `f64`; the SHA-256 of the document (hash field blanked) is
//! checked on load.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{Activation, Dense, Mlp};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint hash mismatch (stored {stored}, computed {computed})")]
    Hash { stored: String, computed: String },
    #[error("expected a {expected:?} checkpoint, found {found:?}")]
    Kind { expected: ModelKind, found: ModelKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Diffusion,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl WeightArray {
    fn encode(name: String, shape: Vec<usize>, values: impl Iterator<Item = f64>) -> Self {
        let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
        Self {
            name,
            shape,
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self) -> Result<Vec<f64>, CheckpointError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| CheckpointError::Format(format!("{}: {e}", self.name)))?;
        let expected: usize = self.shape.iter().product();
        if bytes.len() != 8 * expected {
            return Err(CheckpointError::Format(format!(
                "{}: {} bytes for shape {:?}",
                self.name,
                bytes.len(),
                self.shape
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: ModelKind,
    pub activation: Activation,
    /// Model-specific descriptor: architecture, normalizer, schedule, layout.
    pub meta: serde_json::Value,
    pub weights: Vec<WeightArray>,
    pub content_hash: String,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, mlp: &Mlp, meta: serde_json::Value) -> Self {
        let mut weights = Vec::new();
        for (k, l) in mlp.layers().iter().enumerate() {
            weights.push(WeightArray::encode(
                format!("layer{k}.w"),
                vec![l.w.nrows(), l.w.ncols()],
                l.w.iter().copied(),
            ));
            weights.push(WeightArray::encode(
                format!("layer{k}.b"),
                vec![l.b.len()],
                l.b.iter().copied(),
            ));
        }
        let mut ck = Self {
            format_version: FORMAT_VERSION,
            kind,
            activation: mlp.activation(),
            meta,
            weights,
            content_hash: String::new(),
        };
        ck.content_hash = ck.compute_hash();
        ck
    }

    fn compute_hash(&self) -> String {
        let mut blank = self.clone();
        blank.content_hash.clear();
        let text = serde_json::to_string(&blank).expect("checkpoint serialization cannot fail");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn mlp(&self) -> Result<Mlp, CheckpointError> {
        if !self.weights.len().is_multiple_of(2) || self.weights.is_empty() {
            return Err(CheckpointError::Format("weights must come in (w, b) pairs".into()));
        }
        let mut layers = Vec::new();
        for pair in self.weights.chunks(2) {
            let (w, b) = (&pair[0], &pair[1]);
            if w.shape.len() != 2 || b.shape.len() != 1 {
                return Err(CheckpointError::Format(format!("bad shapes for {}", w.name)));
            }
            let w_arr = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.decode()?)
                .map_err(|e| CheckpointError::Format(e.to_string()))?;
            layers.push(Dense {
                w: w_arr,
                b: Array1::from(b.decode()?),
            });
        }
        Mlp::from_layers(layers, self.activation).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind {
                expected: kind,
                found: self.kind,
            })
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ck: Self =
            serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        let computed = ck.compute_hash();
        if computed != ck.content_hash {
            return Err(CheckpointError::Hash {
                stored: ck.content_hash,
                computed,
            });
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
