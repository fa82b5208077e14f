//! Binary checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `REGOCKPT`                          |
//! | 8      | 4    | container version (`u32`)                 |
//! | 12     | 8    | header length `L` in bytes (`u64`)        |
//! | 20     | L    | UTF-8 JSON header                         |
//! | 20+L   | ...  | tensor payloads, concatenated             |
//!
//! The header records the model configuration, iteration, an opaque RNG
//! state and a manifest of `{name, shape, kind, offset, len}` entries whose
//! offsets are relative to the start of the payload section. Payloads are
//! little-endian `f32` by default, or `f64` for a lossless round trip.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RegoError, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::nn::{ParamKind, ParamStore};
use crate::styleloss::StyleConfig;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"REGOCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub style: StyleConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    kind: String,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: Dtype,
    config: ModelConfig,
    iteration: u64,
    rng_state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A trained (or freshly initialized) model with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub iteration: u64,
    /// Opaque to everything except the trainer.
    pub rng_state: serde_json::Value,
}

impl ModelCheckpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            config,
            params,
            iteration: 0,
            rng_state: serde_json::Value::Null,
        }
    }

    /// Fresh weights drawn from the generator seed.
    pub fn initialize(config: ModelConfig) -> Result<Self> {
        config.style.validate()?;
        let params = Generator::new(&config.generator)?.init_params()?;
        Ok(Self::new(config, params))
    }

    /// Builds the architecture and verifies the tensors against its manifest.
    pub fn generator(&self) -> Result<Generator> {
        let g = Generator::new(&self.config.generator)?;
        self.params.check_against(&g.specs())?;
        Ok(g)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, p) in self.params.iter() {
            let len = p.value.len() as u64;
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: p.value.shape(),
                kind: match p.kind {
                    ParamKind::Trainable => "param".into(),
                    ParamKind::Buffer => "buffer".into(),
                },
                offset,
                len,
            });
            offset += len * dtype.width() as u64;
        }
        let header = serde_json::to_vec(&Header {
            version: self.version,
            dtype,
            config: self.config.clone(),
            iteration: self.iteration,
            rng_state: self.rng_state.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.params.iter() {
            for &v in p.value.data() {
                match dtype {
                    Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| RegoError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(RegoError::Checkpoint(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])?;
        if header.version != CHECKPOINT_VERSION {
            return Err(RegoError::Checkpoint(format!("unsupported checkpoint version {}", header.version)));
        }
        let payload = &bytes[payload_start..];
        let width = header.dtype.width();
        let mut params = ParamStore::new();
        for t in &header.tensors {
            let count: usize = t.shape.iter().product();
            if count as u64 != t.len {
                return Err(RegoError::Checkpoint(format!("{}: shape and length disagree", t.name)));
            }
            let start = t.offset as usize;
            let end = start + count * width;
            if end > payload.len() {
                return Err(RegoError::Checkpoint(format!("{}: payload truncated", t.name)));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(width)
                .map(|c| match header.dtype {
                    Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                    Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            let kind = match t.kind.as_str() {
                "param" => ParamKind::Trainable,
                "buffer" => ParamKind::Buffer,
                other => return Err(RegoError::Checkpoint(format!("{}: unknown kind {other}", t.name))),
            };
            params.insert(t.name.clone(), Tensor::from_vec(t.shape, data)?, kind);
        }
        let ckpt = ModelCheckpoint {
            version: header.version,
            config: header.config,
            params,
            iteration: header.iteration,
            rng_state: header.rng_state,
        };
        ckpt.generator()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        // write-then-rename so a crash never leaves a half-written checkpoint
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| RegoError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| RegoError::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| RegoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| RegoError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
