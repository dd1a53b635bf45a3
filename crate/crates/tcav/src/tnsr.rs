//! TNSR tensor blocks: `"TNSR"`, `u32` rank, `rank` x `u32` extents, then
//! the row-major payload as `f32`, all little-endian.
//!
//! Values are narrowed to `f32` on write and widened on read, so tensors
//! whose values already sit on the `f32` grid round-trip exactly.

use std::fs;
use std::path::Path;

use tcav_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";

/// Appends one TNSR block to `out`.
pub fn write_block(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.len() * 4);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    write_block(&mut out, t);
    out
}

/// Little-endian cursor over a byte buffer; every read checks bounds.
pub struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.remaining() < n {
            return Err(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// Reads one TNSR block.
    pub fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        if self.take(4)? != MAGIC {
            return Err("bad magic (expected TNSR)".into());
        }
        let rank = self.u32()? as usize;
        if rank > self.remaining() / 4 {
            return Err(format!(
                "truncated: rank {rank} exceeds the remaining bytes"
            ));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| format!("shape {shape:?} overflows"))?;
        let bytes = len
            .checked_mul(4)
            .ok_or_else(|| format!("shape {shape:?} overflows"))?;
        let payload = self.take(bytes)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

/// Decodes a buffer holding exactly one TNSR block.
pub fn decode(buf: &[u8]) -> std::result::Result<Tensor, String> {
    let mut c = Cursor::new(buf);
    let t = c.tensor()?;
    if c.remaining() != 0 {
        return Err(format!("{} trailing bytes after tensor", c.remaining()));
    }
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|r| Error::format(path, r))
}
