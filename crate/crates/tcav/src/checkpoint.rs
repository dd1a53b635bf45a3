//! CAVM model checkpoints.
//!
//! ```text
//! "CAVM"  u16 version (1)
//! u32 input rank, rank x u32 extents
//! u32 layer count
//! per layer: u8 kind tag, u32 name length, name (UTF-8),
//!            u32 shape-int count, that many u32 shape ints
//! per parametric layer, in layer order: weight TNSR block, bias TNSR block
//! ```
//!
//! Kind tags and shape ints: conv = 0 with `[kernel_h, kernel_w, filters,
//! stride, padding]` (padding 0 = valid, 1 = same); dense = 1 with
//! `[units]`; relu = 2 and flatten = 3 with none. Integers are
//! little-endian.

use std::fs;
use std::path::Path;

use tcav_core::model::{LayerKind, LayerSpec, LayeredModel, Params};
use tcav_core::ops::Padding;

use crate::error::{Error, Result};
use crate::tnsr::{self, Cursor};

pub const MAGIC: &[u8; 4] = b"CAVM";
pub const VERSION: u16 = 1;

const TAG_CONV: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_FLATTEN: u8 = 3;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(model: &LayeredModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, model.input_shape().len());
    for &d in model.input_shape() {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, model.layers().len());
    for layer in model.layers() {
        let (tag, ints): (u8, Vec<usize>) = match &layer.kind {
            LayerKind::Conv {
                kernel_h,
                kernel_w,
                filters,
                stride,
                padding,
            } => {
                let pad = match padding {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                };
                (TAG_CONV, vec![*kernel_h, *kernel_w, *filters, *stride, pad])
            }
            LayerKind::Dense { units } => (TAG_DENSE, vec![*units]),
            LayerKind::Relu => (TAG_RELU, vec![]),
            LayerKind::Flatten => (TAG_FLATTEN, vec![]),
        };
        out.push(tag);
        put_u32(&mut out, layer.name.len());
        out.extend_from_slice(layer.name.as_bytes());
        put_u32(&mut out, ints.len());
        for v in ints {
            put_u32(&mut out, v);
        }
    }
    for p in model.params().iter().flatten() {
        tnsr::write_block(&mut out, &p.weight);
        tnsr::write_block(&mut out, &p.bias);
    }
    out
}

pub fn decode(buf: &[u8]) -> std::result::Result<LayeredModel, String> {
    let mut c = Cursor::new(buf);
    if c.take(4)? != MAGIC {
        return Err("bad magic (expected CAVM)".into());
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        ));
    }
    let rank = c.u32()? as usize;
    let input_shape: Vec<usize> = (0..rank.min(c.remaining() / 4))
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<_, _>>()?;
    if input_shape.len() != rank {
        return Err("truncated input shape".into());
    }
    let count = c.u32()? as usize;
    let mut layers = Vec::new();
    for i in 0..count {
        let tag = c.u8()?;
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| format!("layer {i}: name is not UTF-8"))?
            .to_string();
        let n = c.u32()? as usize;
        if n > c.remaining() / 4 {
            return Err(format!("truncated shape ints of layer `{name}`"));
        }
        let ints: Vec<usize> = (0..n)
            .map(|_| c.u32().map(|v| v as usize))
            .collect::<Result<_, _>>()?;
        let kind = match (tag, ints.as_slice()) {
            (TAG_CONV, &[kernel_h, kernel_w, filters, stride, pad]) => LayerKind::Conv {
                kernel_h,
                kernel_w,
                filters,
                stride,
                padding: match pad {
                    0 => Padding::Valid,
                    1 => Padding::Same,
                    _ => return Err(format!("layer `{name}`: unknown padding code {pad}")),
                },
            },
            (TAG_DENSE, &[units]) => LayerKind::Dense { units },
            (TAG_RELU, &[]) => LayerKind::Relu,
            (TAG_FLATTEN, &[]) => LayerKind::Flatten,
            _ => {
                return Err(format!(
                    "layer `{name}`: bad kind tag {tag} with {} shape ints",
                    ints.len()
                ))
            }
        };
        layers.push(LayerSpec { name, kind });
    }
    let mut params = Vec::with_capacity(layers.len());
    for layer in &layers {
        params.push(if layer.has_params() {
            let weight = c
                .tensor()
                .map_err(|e| format!("weights of `{}`: {e}", layer.name))?;
            let bias = c
                .tensor()
                .map_err(|e| format!("bias of `{}`: {e}", layer.name))?;
            Some(Params { weight, bias })
        } else {
            None
        });
    }
    if c.remaining() != 0 {
        return Err(format!(
            "{} trailing bytes after the last weight block",
            c.remaining()
        ));
    }
    LayeredModel::from_parts(input_shape, layers, params).map_err(|e| e.to_string())
}

pub fn save(path: impl AsRef<Path>, model: &LayeredModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<LayeredModel> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|r| Error::format(path, r))
}
