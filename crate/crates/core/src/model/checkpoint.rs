//! Binary checkpoints.
//!
//! ```text
//! "AVC1" | version u16 | header length u32 | header JSON
//! tensor count u32 | per tensor: name length u16, name, rows u32, cols u32, rows·cols f32
//! ```
//!
//! Numbers use the same little-endian `f32` encoding as bag files. Model
//! parameters come first in registration order; optimizer state, when
//! present, follows as extra tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::format::{ByteReader, ByteWriter};
use crate::error::{Error, FormatError, Result};
use crate::nn::{NamedTensor, Parameters};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AVC1";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub param_count: usize,
    /// Opaque training-loop state (step, optimizer hyperparameters, RNG).
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<NamedTensor<f32>>,
    pub extra: Vec<NamedTensor<f32>>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(config: &ModelConfig, model: &Model<T>) -> Self {
        let params: Vec<_> = model
            .snapshot()
            .into_iter()
            .map(|t| NamedTensor {
                name: t.name,
                shape: t.shape,
                data: t.data.iter().map(|v| v.to_f32_lossy()).collect(),
            })
            .collect();
        Self {
            header: CheckpointHeader {
                model: config.clone(),
                param_count: params.len(),
                train_state: None,
            },
            params,
            extra: Vec::new(),
        }
    }

    /// Rebuilds the model described by the header and loads its parameters.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::<T>::new(&self.header.model, &mut rng)?;
        let tensors: Vec<_> = self
            .params
            .iter()
            .map(|t| NamedTensor {
                name: t.name.clone(),
                shape: t.shape,
                data: t.data.iter().map(|&v| T::of_f32(v)).collect(),
            })
            .collect();
        model.load(&tensors)?;
        Ok(model)
    }
}

fn write_tensor(w: &mut ByteWriter, t: &NamedTensor<f32>) -> Result<()> {
    let name = t.name.as_bytes();
    let len = u16::try_from(name.len()).map_err(|_| Error::invalid("tensor name too long"))?;
    w.u16(len);
    w.bytes(name);
    for d in [t.shape.0, t.shape.1] {
        w.u32(u32::try_from(d).map_err(|_| Error::invalid("tensor dim exceeds u32"))?);
    }
    w.f32s(t.data.iter());
    Ok(())
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<NamedTensor<f32>, FormatError> {
    let len = r.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "tensor name")?)
        .map_err(|e| FormatError::Header(e.to_string()))?
        .to_string();
    let rows = r.u32("tensor rows")? as usize;
    let cols = r.u32("tensor cols")? as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or(FormatError::Truncated("tensor data"))?;
    let data = r.f32s(count, "tensor data")?;
    Ok(NamedTensor {
        name,
        shape: (rows, cols),
        data,
    })
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = ckpt.header.clone();
    header.param_count = ckpt.params.len();
    let json = serde_json::to_vec(&header)?;
    let mut w = ByteWriter::new();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u32(u32::try_from(json.len()).map_err(|_| Error::invalid("header too large"))?);
    w.bytes(&json);
    let total = ckpt.params.len() + ckpt.extra.len();
    w.u32(u32::try_from(total).map_err(|_| Error::invalid("too many tensors"))?);
    for t in ckpt.params.iter().chain(&ckpt.extra) {
        write_tensor(&mut w, t)?;
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(len, "header")?)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let total = r.u32("tensor count")? as usize;
    if header.param_count > total {
        return Err(FormatError::Header(format!(
            "{} parameters declared, {total} tensors present",
            header.param_count
        ))
        .into());
    }
    let mut tensors = Vec::with_capacity(total.min(1 << 16));
    for _ in 0..total {
        tensors.push(read_tensor(&mut r)?);
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes(r.remaining()).into());
    }
    let extra = tensors.split_off(header.param_count);
    Ok(Checkpoint {
        header,
        params: tensors,
        extra,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
