//! Checkpoint container: magic, a JSON config block, a tensor
//! directory, then a packed little-endian f32 payload.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LCUMINI1"                                      8 bytes
//! json_len: u32, then json_len bytes of UTF-8 JSON {model, train}
//! tensor_count: u32
//! per tensor: name_len u32, name bytes, dtype u8 (0 = f32),
//!             ndim u32, dims u32 each, offset u64, byte_len u64
//! payload: packed f32 values, offsets relative to payload start
//! ```
//!
//! Offsets must tile the payload exactly: in-bounds, non-overlapping,
//! and summing to its length. Payloads are always f32; loading into a
//! wider scalar widens losslessly, saving from one narrows.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{attach_lora, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"LCUMINI1";
const DTYPE_F32: u8 = 0;
const MAX_NDIM: u32 = 8;

#[derive(Serialize, Deserialize)]
struct ConfigBlock {
    model: ModelConfig,
    train: TrainConfig,
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn all_tensors<T: Scalar>(model: &Model<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = model.params();
    out.extend(model.adapter_params());
    out
}

fn encode<T: Scalar>(model: &Model<T>, train: &TrainConfig) -> Result<Vec<u8>> {
    let block = ConfigBlock {
        model: model.config().clone(),
        train: train.clone(),
    };
    let json = serde_json::to_vec(&block)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    let tensors = all_tensors(model);

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(&json);
    push_u32(&mut buf, tensors.len() as u32);
    let mut offset = 0u64;
    for (name, t) in &tensors {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        push_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            push_u32(&mut buf, d as u32);
        }
        let byte_len = t.numel() as u64 * 4;
        push_u64(&mut buf, offset);
        push_u64(&mut buf, byte_len);
        offset += byte_len;
    }
    for (_, t) in &tensors {
        for v in t.data().iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Writes the model (base and adapter tensors) plus its config and the
/// training recipe that produced it.
pub fn save<T: Scalar>(path: &Path, model: &Model<T>, train: &TrainConfig) -> Result<()> {
    let bytes = encode(model, train)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: expected {n} more bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct DirEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

fn parse_directory(r: &mut Reader<'_>) -> Result<Vec<DirEntry>> {
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let dtype = r.u8("dtype tag")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has unsupported dtype tag {dtype}"
            )));
        }
        let ndim = r.u32("rank")?;
        if ndim > MAX_NDIM {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' claims rank {ndim}"
            )));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.u32("dimension")? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' shape overflows")))?;
            shape.push(d);
        }
        let offset = r.u64("payload offset")?;
        let byte_len = r.u64("payload length")?;
        if byte_len != numel as u64 * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': shape {shape:?} wants {} bytes, directory says {byte_len}",
                numel * 4
            )));
        }
        entries.push(DirEntry {
            name,
            shape,
            offset,
            byte_len,
        });
    }
    Ok(entries)
}

fn check_payload_tiling(entries: &[DirEntry], payload_len: u64) -> Result<()> {
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|e| (e.offset, e.byte_len, e.name.as_str()))
        .collect();
    spans.sort_unstable();
    let mut covered = 0u64;
    let mut prev_end = 0u64;
    for (off, len, name) in spans {
        let end = off
            .checked_add(len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' offset overflows")))?;
        if end > payload_len {
            return Err(Error::Checkpoint(format!(
                "truncated payload: tensor '{name}' ends at byte {end} of {payload_len}"
            )));
        }
        if off < prev_end {
            return Err(Error::Checkpoint(format!(
                "overlapping directory offsets at tensor '{name}'"
            )));
        }
        prev_end = end;
        covered += len;
    }
    if covered != payload_len {
        return Err(Error::Checkpoint(format!(
            "payload holds {payload_len} bytes but the directory accounts for {covered}"
        )));
    }
    Ok(())
}

/// Loads a checkpoint: verifies magic, config, directory bounds, and
/// that the tensor set matches the model implied by the config block
/// (including adapters). Returns the model and the training recipe it
/// was saved with.
pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, TrainConfig)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}: not a checkpoint produced by this tool",
            String::from_utf8_lossy(magic)
        )));
    }
    let json_len = r.u32("config length")? as usize;
    let json = r.take(json_len, "config block")?;
    let block: ConfigBlock = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint(format!("config block is not valid JSON: {e}")))?;
    block.model.validate()?;
    block.train.validate()?;

    let entries = parse_directory(&mut r)?;
    let payload = &bytes[r.pos..];
    check_payload_tiling(&entries, payload.len() as u64)?;

    // Values are overwritten below; the rng only shapes the graph.
    let mut scaffold_rng = ChaCha20Rng::seed_from_u64(0);
    let mut model = Model::<T>::new(block.model.clone(), &mut scaffold_rng)?;
    if let Some(a) = &block.train.adapter {
        attach_lora(&mut model, a.rank, a.alpha, &a.targets, &mut scaffold_rng)?;
    }

    let expected = all_tensors(&model);
    if entries.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the config implies {}",
            entries.len(),
            expected.len()
        )));
    }
    for ((name, param), entry) in expected.iter().zip(&entries) {
        if name != &entry.name {
            return Err(Error::Checkpoint(format!(
                "tensor name mismatch: checkpoint has '{}', expected '{name}'",
                entry.name
            )));
        }
        if param.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}': checkpoint shape {:?}, model wants {:?}",
                entry.shape,
                param.shape()
            )));
        }
        let start = entry.offset as usize;
        let raw = &payload[start..start + entry.byte_len as usize];
        let mut data = param.data_mut();
        for (dst, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            *dst = T::from_f64(v as f64);
        }
        drop(data);
        param.zero_grad();
    }
    Ok((model, block.train))
}
