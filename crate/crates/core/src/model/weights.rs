//! Weight files: magic `DRWKV1\0`, a `u32` little-endian manifest length,
//! a JSON manifest, then raw little-endian `f32` payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{init_weights, ModelConfig};
use crate::error::{Error, Result};
use crate::init::ParamStore;
use crate::tensor::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 7] = b"DRWKV1\0";
pub const WEIGHTS_VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ModelConfig,
    pub entries: Vec<ManifestEntry>,
}

/// A configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct DrwkvWeights {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl DrwkvWeights {
    /// Fresh weights drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_weights(&config)?;
        Ok(Self { config, params })
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let entries = self
            .params
            .iter()
            .map(|p| {
                let e = ManifestEntry {
                    name: p.name.clone(),
                    dtype: DTYPE.into(),
                    shape: p.value.shape().to_vec(),
                    offset,
                    requires_grad: p.requires_grad,
                };
                offset += 4 * p.value.numel();
                e
            })
            .collect();
        Manifest {
            version: WEIGHTS_VERSION,
            config: self.config.clone(),
            entries,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest()).map_err(|e| Error::invalid("save_weights", e.to_string()))?;
        let len = u32::try_from(manifest.len()).map_err(|_| Error::invalid("save_weights", "manifest too large"))?;
        let mut out = Vec::with_capacity(WEIGHTS_MAGIC.len() + 4 + manifest.len() + 4 * self.params.trainable_count());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for p in self.params.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a weights image. `path` is only used in errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::WeightsFormat {
            path: PathBuf::from(path),
            msg,
        };
        let header = WEIGHTS_MAGIC.len() + 4;
        if bytes.len() < header {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..WEIGHTS_MAGIC.len()] != WEIGHTS_MAGIC {
            return Err(bad("bad magic, not a DRWKV1 weights file".into()));
        }
        let len = u32::from_le_bytes(bytes[WEIGHTS_MAGIC.len()..header].try_into().expect("4 bytes")) as usize;
        let body = header
            .checked_add(len)
            .filter(|end| *end <= bytes.len())
            .ok_or_else(|| bad(format!("manifest length {len} exceeds file size")))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[header..body]).map_err(|e| bad(format!("malformed manifest: {e}")))?;
        if manifest.version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported version {}", manifest.version)));
        }
        let payload = &bytes[body..];

        let expected = init_weights::<f32>(&manifest.config)?;
        let unknown: Vec<String> = manifest
            .entries
            .iter()
            .filter(|e| !expected.contains(&e.name))
            .map(|e| e.name.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownParameters(unknown));
        }

        let mut params = ParamStore::new();
        let mut offset = 0;
        for e in &manifest.entries {
            if e.dtype != DTYPE {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let want = expected.get(&e.name)?;
            if want.value.shape() != e.shape.as_slice() {
                return Err(bad(format!(
                    "{}: shape {:?} does not match architecture {:?}",
                    e.name,
                    e.shape,
                    want.value.shape()
                )));
            }
            if e.offset != offset {
                return Err(bad(format!("{}: offset {} is not contiguous (expected {offset})", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(bad(format!("truncated payload at {}", e.name)));
            }
            let data: Vec<f32> = payload[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{}: non-finite value", e.name)));
            }
            params.insert(e.name.clone(), Tensor::new(&e.shape, data)?, want.requires_grad)?;
            offset = end;
        }
        if offset != payload.len() {
            return Err(bad(format!("{} trailing payload bytes", payload.len() - offset)));
        }
        if let Some(missing) = expected.names().find(|n| !params.contains(n)) {
            return Err(Error::MissingParameter(missing.to_string()));
        }
        Ok(Self {
            config: manifest.config,
            params,
        })
    }
}

pub fn save_weights(w: &DrwkvWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, w.to_bytes()?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<DrwkvWeights> {
    let path = path.as_ref();
    DrwkvWeights::from_bytes(&fs::read(path)?, path)
}
