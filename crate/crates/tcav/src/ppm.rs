//! Binary PPM (P6, maxval 255) images, heatmaps and contact sheets.
//!
//! Images are `[h, w, 3]` tensors with values in `[0, 1]`. A byte `b`
//! reads back as the `f32` nearest to `b / 255`, the same grid the
//! generators draw on, so generated images round-trip exactly.

use std::fs;
use std::path::Path;

use tcav_core::dataset::texture::quantize;
use tcav_core::Tensor;

use crate::error::{Error, Result};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(image: &Tensor) -> std::result::Result<Vec<u8>, String> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(format!("PPM needs an [h, w, 3] image, got {s:?}"));
    }
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(buf: &'a [u8], pos: &mut usize) -> std::result::Result<&'a [u8], String> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    Ok(&buf[start..*pos])
}

fn number(buf: &[u8], pos: &mut usize, what: &str) -> std::result::Result<usize, String> {
    let t = token(buf, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("bad {what} in header"))
}

pub fn decode(buf: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    if token(buf, &mut pos)? != b"P6" {
        return Err("not a binary PPM (expected P6)".into());
    }
    let w = number(buf, &mut pos, "width")?;
    let h = number(buf, &mut pos, "height")?;
    let maxval = number(buf, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (only 255)"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err("truncated header".into());
    }
    pos += 1;
    let n = w * h * 3;
    let raster = &buf[pos..];
    if raster.len() != n {
        return Err(format!("expected {n} raster bytes, found {}", raster.len()));
    }
    let data = raster.iter().map(|&b| quantize(b as f64 / 255.0)).collect();
    Tensor::new(vec![h, w, 3], data).map_err(|e| e.to_string())
}

pub fn save(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(image).map_err(|r| Error::format(path, r))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|r| Error::format(path, r))
}

/// Renders a non-negative `[h, w]` map as a black-to-white-hot RGB image,
/// scaled so the maximum is white.
pub fn heatmap(map: &Tensor) -> Tensor {
    let s = map.shape();
    let (h, w) = (s[0], s.get(1).copied().unwrap_or(1));
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::with_capacity(h * w * 3);
    for &v in map.data() {
        let t = if max > 0.0 {
            (v / max).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.extend([
            (t * 3.0).min(1.0),
            (t * 3.0 - 1.0).clamp(0.0, 1.0),
            (t * 3.0 - 2.0).clamp(0.0, 1.0),
        ]);
    }
    Tensor::new(vec![h, w, 3], out).expect("heatmap shape")
}

/// Tiles equally sized `[h, w, 3]` images row by row, `cols` per row, with a
/// one-pixel grey gutter.
pub fn contact_sheet(images: &[&Tensor], cols: usize) -> std::result::Result<Tensor, String> {
    let first = images
        .first()
        .ok_or("contact sheet needs at least one image")?;
    let s = first.shape().to_vec();
    if images.iter().any(|i| i.shape() != s.as_slice()) || s.len() != 3 {
        return Err("contact sheet images must share one [h, w, 3] shape".into());
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (sh, sw) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut out = vec![0.5; sh * sw * c];
    for (n, img) in images.iter().enumerate() {
        let (oy, ox) = ((n / cols) * (h + 1) + 1, (n % cols) * (w + 1) + 1);
        for y in 0..h {
            let src = &img.data()[y * w * c..(y + 1) * w * c];
            let dst = ((oy + y) * sw + ox) * c;
            out[dst..dst + w * c].copy_from_slice(src);
        }
    }
    Tensor::new(vec![sh, sw, c], out).map_err(|e| e.to_string())
}
