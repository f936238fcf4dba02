//! Model checkpoints.
//!
//! Layout: the 8-byte magic `EVIDCKPT`, a little-endian `u32` manifest
//! length, a JSON manifest, then every tensor as little-endian `f32` in
//! manifest order. The manifest carries the format version, the epoch, the
//! validation Dice at save time, the full run configuration, and each
//! tensor's name, shape, and element offset. Training streams are derived
//! from the configured seed and the epoch, so no generator state is stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::graph::ParamSet;
use crate::model::model_param_shapes;
use crate::tensor::Tensor;
use crate::volume::{io_err, VolumeError};

pub const MAGIC: &[u8; 8] = b"EVIDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("invalid tensor table: {0}")]
    Table(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("tensor `{name}`: config expects shape {expected:?}, checkpoint has {found:?}")]
    TensorMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{0}` required by the config is missing")]
    MissingTensor(String),
    #[error("tensor `{0}` is not part of the configured model")]
    UnexpectedTensor(String),
    #[error("tensor `{0}` holds a non-finite value")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] VolumeError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// in elements from the start of the blob
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    epoch: usize,
    val_dice: Option<f64>,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_dice: Option<f64>,
    pub config: RunConfig,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let manifest = Manifest {
            version: VERSION,
            epoch: self.epoch,
            val_dice: self.val_dice,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 4] = rest
            .get(..4)
            .ok_or(CheckpointError::Truncated("manifest length"))?
            .try_into()
            .expect("four bytes");
        let mlen = u32::from_le_bytes(len_bytes) as usize;
        let json = rest.get(4..4 + mlen).ok_or(CheckpointError::Truncated("manifest"))?;
        // peek at the version before the strict parse so old or future
        // files report the right error
        #[derive(Deserialize)]
        struct VersionOnly {
            version: u32,
        }
        let v: VersionOnly = serde_json::from_slice(json)?;
        if v.version != VERSION {
            return Err(CheckpointError::Version(v.version));
        }
        let manifest: Manifest = serde_json::from_slice(json)?;
        manifest.config.validate()?;
        let blob = &rest[4 + mlen..];
        if blob.len() % 4 != 0 {
            return Err(CheckpointError::Table(format!("blob of {} bytes is not f32-aligned", blob.len())));
        }
        let n_floats = blob.len() / 4;

        let mut params = ParamSet::new();
        let mut expected_offset = 0usize;
        for e in &manifest.tensors {
            if e.offset != expected_offset {
                return Err(CheckpointError::Table(format!(
                    "tensor `{}` at offset {} (expected {expected_offset})",
                    e.name, e.offset
                )));
            }
            let n = e
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| CheckpointError::Table(format!("tensor `{}` has shape {:?}", e.name, e.shape)))?;
            let end = expected_offset
                .checked_add(n)
                .filter(|&end| end <= n_floats)
                .ok_or(CheckpointError::Truncated("tensor data"))?;
            let data: Vec<f32> = blob[4 * expected_offset..4 * end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite(e.name.clone()));
            }
            if params.get(&e.name).is_some() {
                return Err(CheckpointError::Table(format!("duplicate tensor `{}`", e.name)));
            }
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data).expect("length checked"));
            expected_offset = end;
        }
        if expected_offset != n_floats {
            return Err(CheckpointError::Table(format!(
                "{} trailing values after the last tensor",
                n_floats - expected_offset
            )));
        }
        let ckpt = Checkpoint {
            epoch: manifest.epoch,
            val_dice: manifest.val_dice,
            config: manifest.config,
            params,
        };
        ckpt.check_compatible()?;
        Ok(ckpt)
    }

    /// Tensors must be exactly those of the model described by the config.
    pub fn check_compatible(&self) -> Result<(), CheckpointError> {
        let c = &self.config;
        let shapes = model_param_shapes(&c.backbone, c.es.head, &c.es.init());
        for (name, shape) in &shapes {
            match self.params.get(name) {
                None => return Err(CheckpointError::MissingTensor(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(CheckpointError::TensorMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.params.names().find(|n| !shapes.iter().any(|(s, _)| s == *n)) {
            return Err(CheckpointError::UnexpectedTensor(extra.clone()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn sample() -> Checkpoint {
        let config = RunConfig::default();
        let params = init_model(&config.backbone, config.es.head, &config.es.init(), 3).unwrap();
        Checkpoint {
            epoch: 7,
            val_dice: Some(0.81),
            config,
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn version_mismatch_reported() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes[12..]).into_owned();
        let patched = text.replacen("\"version\":1", "\"version\":2", 1);
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(patched.as_bytes());
        assert!(matches!(Checkpoint::from_bytes(&out), Err(CheckpointError::Version(2))));
    }

    #[test]
    fn config_mismatch_names_tensor() {
        let mut c = sample();
        c.config.es.prototypes = 10;
        let err = Checkpoint::from_bytes(&c.to_bytes()).unwrap_err();
        match err {
            CheckpointError::TensorMismatch { name, .. } => assert!(name.starts_with("es."), "{name}"),
            other => panic!("unexpected {other}"),
        }
    }
}
