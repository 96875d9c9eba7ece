//! Checkpoint serialization.
//!
//! Layout: magic `NFCK`, format version u32, length-prefixed UTF-8 JSON
//! document (config + training metadata), then a tensor table: count u32,
//! and per tensor a u16-length name, dtype tag u8 (0 = f32, 1 = f16,
//! 2 = i8 with per-output-channel f32 scales), rank u8, u32 dims, and the
//! raw little-endian payload. For tag 2 the payload is `dims[0]` f32
//! scales followed by the i8 codes (zero-point is always 0 and not stored).

use super::quant::QuantTensor;
use super::{Checkpoint, CheckpointConfig, CheckpointMeta};
use crate::error::{Error, Result};
use half::f16;
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NFCK";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F16: u8 = 1;
const DTYPE_I8: u8 = 2;

#[derive(Serialize, Deserialize)]
struct Document {
    config: CheckpointConfig,
    meta: CheckpointMeta,
}

/// Serializes a checkpoint to its on-disk byte form.
pub fn save(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let doc = serde_json::to_string(&Document { config: ckpt.config, meta: ckpt.meta })
        .expect("checkpoint config serializes");
    out.extend_from_slice(&(doc.len() as u32).to_le_bytes());
    out.extend_from_slice(doc.as_bytes());

    let layout = ckpt.layout();
    out.extend_from_slice(&(layout.specs.len() as u32).to_le_bytes());
    for spec in &layout.specs {
        let name = spec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let quant = ckpt.quant.as_ref().and_then(|q| q.iter().find(|t| t.name == spec.name));
        match quant {
            Some(t) => {
                out.push(DTYPE_I8);
                out.push(spec.shape.len() as u8);
                for &d in &spec.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for s in &t.scales {
                    out.extend_from_slice(&s.to_le_bytes());
                }
                out.extend(t.codes.iter().map(|&c| c as u8));
            }
            None => {
                out.push(DTYPE_F32);
                out.push(spec.shape.len() as u8);
                for &d in &spec.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in &ckpt.params[spec.range()] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Parses checkpoint bytes, validating shapes against the stored config.
pub fn load(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let doc_len = c.u32()? as usize;
    let doc_bytes = c.take(doc_len)?;
    let doc: Document = serde_json::from_slice(doc_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint config document: {e}")))?;
    let layout = super::ParamLayout::build(&doc.config.net)?;

    let count = c.u32()? as usize;
    if count != layout.specs.len() {
        return Err(Error::Format(format!(
            "checkpoint stores {count} tensors but the config implies {}",
            layout.specs.len()
        )));
    }
    let mut params = vec![0.0f32; layout.total];
    let mut quant: Vec<QuantTensor> = Vec::new();
    for spec in &layout.specs {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::Format(format!("expected tensor '{}', found '{name}'", spec.name)));
        }
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        if rank != spec.shape.len() {
            return Err(Error::Format(format!("tensor '{name}' rank {rank} != {}", spec.shape.len())));
        }
        for &expect in &spec.shape {
            let d = c.u32()? as usize;
            if d != expect {
                return Err(Error::Format(format!("tensor '{name}' dim {d} != {expect}")));
            }
        }
        let dst = &mut params[spec.range()];
        match dtype {
            DTYPE_F32 => {
                for v in dst.iter_mut() {
                    *v = c.f32()?;
                }
            }
            DTYPE_F16 => {
                for v in dst.iter_mut() {
                    let raw = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
                    *v = f16::from_bits(raw).to_f32();
                }
            }
            DTYPE_I8 => {
                let cout = spec.shape[0];
                let per_ch = spec.len() / cout;
                let mut scales = Vec::with_capacity(cout);
                for _ in 0..cout {
                    scales.push(c.f32()?);
                }
                let raw = c.take(spec.len())?;
                let codes: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
                for ch in 0..cout {
                    for i in 0..per_ch {
                        dst[ch * per_ch + i] = codes[ch * per_ch + i] as f32 * scales[ch];
                    }
                }
                quant.push(QuantTensor { name: name.to_string(), scales, codes });
            }
            other => return Err(Error::Format(format!("unknown tensor dtype tag {other}"))),
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Checkpoint::new(doc.config, doc.meta, params, if quant.is_empty() { None } else { Some(quant) })
}

/// Writes a checkpoint file.
pub fn save_file(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, save(ckpt))?)
}

/// Reads a checkpoint file.
pub fn load_file(path: &Path) -> Result<Checkpoint> {
    load(&std::fs::read(path)?)
}
