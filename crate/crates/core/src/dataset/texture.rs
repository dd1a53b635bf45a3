//! Procedural texture generators. Each draws its random parameters
//! (orientation, frequency, phase, colors) from a seed, so a texture is a
//! pure function of `(kind, seed, height, width)`.

use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    /// 1-D periodic bands along a random orientation.
    Striped,
    /// Axis-aligned checkerboard with random cell size.
    Checker,
    /// A few soft Gaussian blobs.
    Blobs,
    /// Regular lattice of round dots.
    Dotted,
    /// Two crossing families of thin lines.
    Meshed,
    /// One flat color with light pixel noise.
    Solid,
    /// Independent uniform pixels.
    Noise,
    /// Plus-shaped crosses, each capped with a dot at every arm's end.
    Composite,
}

impl TextureKind {
    pub const ALL: [TextureKind; 8] = [
        TextureKind::Striped,
        TextureKind::Checker,
        TextureKind::Blobs,
        TextureKind::Dotted,
        TextureKind::Meshed,
        TextureKind::Solid,
        TextureKind::Noise,
        TextureKind::Composite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Striped => "striped",
            TextureKind::Checker => "checker",
            TextureKind::Blobs => "blobs",
            TextureKind::Dotted => "dotted",
            TextureKind::Meshed => "meshed",
            TextureKind::Solid => "solid",
            TextureKind::Noise => "noise",
            TextureKind::Composite => "composite",
        }
    }

    fn id(self) -> u64 {
        TextureKind::ALL
            .iter()
            .position(|&k| k == self)
            .unwrap_or(0) as u64
    }
}

impl fmt::Display for TextureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let kind = match s.to_ascii_lowercase().as_str() {
            "striped" | "stripes" => TextureKind::Striped,
            "checker" | "checkered" => TextureKind::Checker,
            "blobs" | "blob" => TextureKind::Blobs,
            "dotted" | "dots" => TextureKind::Dotted,
            "meshed" | "mesh" => TextureKind::Meshed,
            "solid" | "solid-color" => TextureKind::Solid,
            "noise" | "random" => TextureKind::Noise,
            "composite" | "cross" | "crosses" => TextureKind::Composite,
            _ => return Err(Error::UnknownConcept(String::from(s))),
        };
        Ok(kind)
    }
}

/// Snaps a value in `[0, 1]` to the 8-bit grid, stored as the nearest
/// `f32`. Generated pixels survive both PPM and TNSR round-trips exactly.
pub fn quantize(v: f64) -> f64 {
    let level = math::round(v.clamp(0.0, 1.0) * 255.0);
    (level as f32 / 255.0) as f64
}

fn random_color(r: &mut Rng) -> [f64; 3] {
    [r.gen::<f64>(), r.gen::<f64>(), r.gen::<f64>()]
}

/// Foreground/background pair at least 0.6 apart in RGB distance.
fn contrasting_colors(r: &mut Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let a = random_color(r);
        let b = random_color(r);
        let d2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        if d2 >= 0.36 {
            return (a, b);
        }
    }
}

/// Flat `base` color plus per-example tint and pixel noise: the members of
/// one solid-color concept share a hue.
pub fn render_tinted(base: [f64; 3], seed: u64, height: usize, width: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, TextureKind::Solid.id());
    let tint: [f64; 3] = core::array::from_fn(|_| r.gen_range(-0.08..0.08));
    let mut out = Vec::with_capacity(height * width * 3);
    for _ in 0..height * width {
        for ch in 0..3 {
            out.push(quantize(base[ch] + tint[ch] + r.gen_range(-0.03..0.03)));
        }
    }
    out
}

/// Renders an `height x width x 3` image, row-major HWC, values on the
/// 8-bit grid.
pub fn render(kind: TextureKind, seed: u64, height: usize, width: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, kind.id());
    let (fg, bg) = contrasting_colors(&mut r);
    let coverage: Vec<f64> = match kind {
        TextureKind::Striped => {
            let freq = r.gen_range(0.12..0.25);
            let theta = r.gen_range(0.0..PI);
            let phase = r.gen_range(0.0..2.0 * PI);
            let (c, s) = (math::cos(theta), math::sin(theta));
            field(height, width, |y, x| {
                let t = math::sin(2.0 * PI * freq * (x * c + y * s) + phase);
                (t * 2.0 + 0.5).clamp(0.0, 1.0)
            })
        }
        TextureKind::Checker => {
            let cell = r.gen_range(3..=6) as f64;
            let (oy, ox) = (r.gen_range(0.0..cell), r.gen_range(0.0..cell));
            field(height, width, |y, x| {
                let parity =
                    math::floor((x + ox) / cell) as i64 + math::floor((y + oy) / cell) as i64;
                (parity.rem_euclid(2)) as f64
            })
        }
        TextureKind::Blobs => {
            let count = r.gen_range(3..=6);
            let blobs: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        r.gen_range(0.0..height as f64),
                        r.gen_range(0.0..width as f64),
                        r.gen_range(2.0..5.0),
                    )
                })
                .collect();
            field(height, width, |y, x| {
                blobs
                    .iter()
                    .map(|&(cy, cx, s)| {
                        let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                        math::exp(-d2 / (2.0 * s * s))
                    })
                    .sum::<f64>()
                    .min(1.0)
            })
        }
        TextureKind::Dotted => {
            let spacing = r.gen_range(6.0..9.0);
            let radius = r.gen_range(1.2..2.5);
            let (oy, ox) = (r.gen_range(0.0..spacing), r.gen_range(0.0..spacing));
            field(height, width, |y, x| {
                let dy = wrap(y + oy, spacing) - spacing / 2.0;
                let dx = wrap(x + ox, spacing) - spacing / 2.0;
                if dy * dy + dx * dx <= radius * radius {
                    1.0
                } else {
                    0.0
                }
            })
        }
        TextureKind::Meshed => {
            let spacing = r.gen_range(5.0..8.0);
            let line = r.gen_range(1.0..1.8);
            let theta = r.gen_range(0.0..PI / 2.0);
            let (oy, ox) = (r.gen_range(0.0..spacing), r.gen_range(0.0..spacing));
            let (c, s) = (math::cos(theta), math::sin(theta));
            field(height, width, |y, x| {
                let u = x * c + y * s + ox;
                let v = -x * s + y * c + oy;
                if wrap(u, spacing) < line || wrap(v, spacing) < line {
                    1.0
                } else {
                    0.0
                }
            })
        }
        TextureKind::Composite => {
            let count = r.gen_range(1..=3);
            let crosses: Vec<(f64, f64, f64)> = (0..count)
                .map(|_| {
                    (
                        r.gen_range(0.0..height as f64),
                        r.gen_range(0.0..width as f64),
                        r.gen_range(4.0..8.0),
                    )
                })
                .collect();
            field(height, width, |y, x| {
                let hit = crosses.iter().any(|&(cy, cx, arm)| {
                    let (dy, dx) = ((y - cy).abs(), (x - cx).abs());
                    let bar = (dy <= 1.0 && dx <= arm) || (dx <= 1.0 && dy <= arm);
                    let cap = |ey: f64, ex: f64| (y - ey) * (y - ey) + (x - ex) * (x - ex) <= 4.0;
                    bar || cap(cy - arm, cx)
                        || cap(cy + arm, cx)
                        || cap(cy, cx - arm)
                        || cap(cy, cx + arm)
                });
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
        }
        TextureKind::Solid => field(height, width, |_, _| 1.0),
        TextureKind::Noise => Vec::new(),
    };

    let mut out = Vec::with_capacity(height * width * 3);
    if kind == TextureKind::Noise {
        for _ in 0..height * width * 3 {
            out.push(quantize(r.gen::<f64>()));
        }
        return out;
    }
    let jitter = if kind == TextureKind::Solid {
        0.03
    } else {
        0.05
    };
    for c in coverage {
        for ch in 0..3 {
            let v = c * fg[ch] + (1.0 - c) * bg[ch] + r.gen_range(-jitter..jitter);
            out.push(quantize(v));
        }
    }
    out
}

fn field(height: usize, width: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            out.push(f(y as f64, x as f64));
        }
    }
    out
}

fn wrap(v: f64, period: f64) -> f64 {
    let r = v - math::floor(v / period) * period;
    if r < 0.0 {
        r + period
    } else {
        r
    }
}
