//! Forward kernels and their vector-Jacobian products.
//!
//! Shape conventions:
//!
//! - `add`, `sub`, `mul`: equal shapes, or the right operand's shape is a
//!   suffix of the left's (broadcast over leading axes, e.g. a bias).
//! - `matmul`: `[n, k] x [k, m] -> [n, m]`.
//! - `conv2d`: NHWC input, HWIO kernel, stride 1 or 2, [`Padding::Valid`]
//!   or [`Padding::Same`] (TensorFlow placement: extra padding goes last).
//! - `flatten`: `[n, ...] -> [n, prod(...)]`.
//! - `softmax_cross_entropy`: `[n, k]` logits and `n` labels, mean loss.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// Checks the suffix-broadcast rule and returns the length of the right
/// operand (the period of the broadcast).
fn broadcast_period(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
        Ok(b.len())
    } else {
        Err(mismatch(op, sa, sb))
    }
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let period = broadcast_period(op, a, b)?;
    let bd = b.data();
    let data = a
        .data()
        .chunks(period)
        .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
        .collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_broadcast("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Sums `g` down to the shape of a broadcast right operand of length `period`.
pub(crate) fn reduce_to_period(g: &[f64], period: usize) -> Vec<f64> {
    let mut out = vec![0.0; period];
    for chunk in g.chunks(period) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(mismatch("matmul", sa, sb));
    }
    let (n, k, m) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; n * m];
    matmul_into(a.data(), b.data(), &mut out, n, k, m);
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `out[n, m] += a[n, k] * b[k, m]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Gradients of `matmul` given upstream `g: [n, m]`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &[f64],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    let ga = need_a.then(|| {
        // g [n,m] * b^T [m,k]
        let mut ga = vec![0.0; n * k];
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for p in 0..k {
                let brow = &bd[p * m..(p + 1) * m];
                ga[i * k + p] = math::dot(grow, brow);
            }
        }
        ga
    });
    let gb = need_b.then(|| {
        // a^T [k,n] * g [n,m]
        let mut gb = vec![0.0; k * m];
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let out = &mut gb[p * m..(p + 1) * m];
                for (o, &gv) in out.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        gb
    });
    (ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Resolved geometry of one conv2d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, needed / 2))
        }
    }
}

impl ConvGeometry {
    pub fn resolve(x: &[usize], w: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[3] != w[2] {
            return Err(mismatch("conv2d", x, w));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidConfig(alloc::format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let (out_h, pad_top) = conv_output_extent(x[1], w[0], stride, padding)
            .ok_or_else(|| mismatch("conv2d", x, w))?;
        let (out_w, pad_left) = conv_output_extent(x[2], w[1], stride, padding)
            .ok_or_else(|| mismatch("conv2d", x, w))?;
        Ok(ConvGeometry {
            batch: x[0],
            in_h: x[1],
            in_w: x[2],
            in_c: x[3],
            k_h: w[0],
            k_w: w[1],
            out_c: w[3],
            out_h,
            out_w,
            stride,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.out_c]
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if it
    /// falls inside the (unpadded) image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Visits every (input offset, kernel offset, output offset) triple at
    /// channel 0. Offsets address the NHWC / HWIO / NHWC buffers.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        for n in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let out_off = ((n * g.out_h + oy) * g.out_w + ox) * g.out_c;
                    for ky in 0..g.k_h {
                        let Some(iy) = Self::source(oy, ky, g.stride, g.pad_top, g.in_h) else {
                            continue;
                        };
                        for kx in 0..g.k_w {
                            let Some(ix) = Self::source(ox, kx, g.stride, g.pad_left, g.in_w)
                            else {
                                continue;
                            };
                            let in_off = ((n * g.in_h + iy) * g.in_w + ix) * g.in_c;
                            let k_off = (ky * g.k_w + kx) * g.in_c * g.out_c;
                            f(in_off, k_off, out_off);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::resolve(x.shape(), w.shape(), stride, padding)?;
    let (xd, wd) = (x.data(), w.data());
    let (cin, cout) = (g.in_c, g.out_c);
    let mut out = vec![0.0; g.batch * g.out_h * g.out_w * cout];
    g.for_each_tap(|in_off, k_off, out_off| {
        let orow = &mut out[out_off..out_off + cout];
        for ci in 0..cin {
            let xv = xd[in_off + ci];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[k_off + ci * cout..k_off + (ci + 1) * cout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    });
    Ok(Tensor::from_parts(g.output_shape(), out))
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &[f64],
    geom: &ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (xd, wd) = (x.data(), w.data());
    let (cin, cout) = (geom.in_c, geom.out_c);
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; xd.len()];
        geom.for_each_tap(|in_off, k_off, out_off| {
            let grow = &g[out_off..out_off + cout];
            for ci in 0..cin {
                let wrow = &wd[k_off + ci * cout..k_off + (ci + 1) * cout];
                gx[in_off + ci] += math::dot(grow, wrow);
            }
        });
        gx
    });
    let gw = need_w.then(|| {
        let mut gw = vec![0.0; wd.len()];
        geom.for_each_tap(|in_off, k_off, out_off| {
            let grow = &g[out_off..out_off + cout];
            for ci in 0..cin {
                let xv = xd[in_off + ci];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &mut gw[k_off + ci * cout..k_off + (ci + 1) * cout];
                for (o, &gv) in wrow.iter_mut().zip(grow) {
                    *o += xv * gv;
                }
            }
        });
        gw
    });
    (gx, gw)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn reduce_sum(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.is_empty() {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "flatten needs a leading batch axis".into(),
        });
    }
    let width = s[1..].iter().product();
    x.reshape(&[s[0], width])
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "softmax expects [n, k] logits".into(),
        });
    }
    let k = s[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| math::exp(v - max)).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    Ok(Tensor::from_parts(s.to_vec(), out))
}

/// Mean cross-entropy of `[n, k]` logits against `labels`. Also returns the
/// softmax probabilities, which the backward pass reuses.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let probs = softmax(logits)?;
    let s = logits.shape();
    if labels.len() != s[0] {
        return Err(mismatch("softmax_cross_entropy", s, &[labels.len()]));
    }
    let k = s[1];
    let mut loss = 0.0;
    for (&label, row) in labels.iter().zip(logits.data().chunks(k)) {
        if label >= k {
            return Err(Error::ClassOutOfRange {
                class: label,
                num_classes: k,
            });
        }
        // log-sum-exp form keeps -log p exact for large margins
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
        loss += lse - row[label];
    }
    Ok((Tensor::scalar(loss / s[0] as f64), probs))
}
