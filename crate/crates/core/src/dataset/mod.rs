//! The captioned controlled dataset and concept example sets.
//!
//! A controlled image is a class texture with a caption block (white 3x5
//! letters on black) in its bottom rows. With probability `noise_p` the
//! caption shows a word drawn uniformly from the rest of the caption
//! alphabet (the class words plus distractor words that name no class), so
//! `noise_p` is exactly the disagreement rate.

pub mod glyph;
pub mod texture;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use texture::{quantize, TextureKind};

pub const CHANNELS: usize = 3;

/// A named set of example inputs standing for a concept (or for random
/// negatives).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub name: String,
    pub examples: Vec<Tensor>,
    /// Where the examples came from (generator and seed, or a directory).
    pub provenance: String,
}

impl ConceptSet {
    pub fn new(
        name: impl Into<String>,
        examples: Vec<Tensor>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        let first = examples
            .first()
            .ok_or_else(|| Error::EmptySelection(format!("concept `{name}` has no examples")))?;
        for e in &examples {
            if e.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "concept set",
                    lhs: first.shape().to_vec(),
                    rhs: e.shape().to_vec(),
                });
            }
        }
        Ok(ConceptSet {
            name,
            examples,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn refs(&self) -> Vec<&Tensor> {
        self.examples.iter().collect()
    }

    pub fn example_shape(&self) -> &[usize] {
        self.examples[0].shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Texture generator per class; `classes.len()` is `K`.
    pub classes: Vec<TextureKind>,
    /// Caption words; class `k`'s correct caption is `vocabulary[k]`.
    pub vocabulary: Vec<String>,
    /// Extra words that only ever appear as noisy captions.
    #[serde(default = "default_distractors")]
    pub distractors: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
    pub noise_p: f64,
    /// Height of the caption band at the bottom of the image.
    pub caption_rows: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: vec![
                TextureKind::Striped,
                TextureKind::Checker,
                TextureKind::Blobs,
            ],
            vocabulary: ["ZEBRA", "CAB", "CUCUMBER"]
                .iter()
                .map(|w| w.to_string())
                .collect(),
            distractors: default_distractors(),
            height: 32,
            width: 32,
            train_per_class: 600,
            heldout_per_class: 150,
            noise_p: 0.0,
            caption_rows: 6,
            seed: 0,
        }
    }
}

fn default_distractors() -> Vec<String> {
    ["RABBIT", "LAMP", "HOUSE", "TREE", "BOAT"]
        .iter()
        .map(|w| w.to_string())
        .collect()
}

impl DatasetSpec {
    /// Word number `index` of the caption alphabet: class words first, then
    /// distractors.
    pub fn caption_word(&self, index: usize) -> Option<&str> {
        self.vocabulary
            .iter()
            .chain(&self.distractors)
            .nth(index)
            .map(String::as_str)
    }

    pub fn caption_alphabet_len(&self) -> usize {
        self.vocabulary.len() + self.distractors.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.height, self.width, CHANNELS]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_p) {
            return Err(Error::InvalidConfig(format!(
                "noise_p must lie in [0, 1], got {}",
                self.noise_p
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.vocabulary.len() < self.classes.len() {
            return Err(Error::InvalidConfig(format!(
                "vocabulary has {} words but there are {} classes",
                self.vocabulary.len(),
                self.classes.len()
            )));
        }
        let words: Vec<&String> = self.vocabulary.iter().chain(&self.distractors).collect();
        for (i, w) in words.iter().enumerate() {
            if !glyph::is_renderable(w) {
                return Err(Error::InvalidConfig(format!(
                    "caption word `{w}` must be non-empty A-Z"
                )));
            }
            if words[..i].contains(w) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate caption word `{w}`"
                )));
            }
        }
        if self.caption_rows < glyph::GLYPH_ROWS || self.caption_rows >= self.height {
            return Err(Error::InvalidConfig(format!(
                "caption_rows must be in [{}, height)",
                glyph::GLYPH_ROWS
            )));
        }
        if self.width < glyph::ADVANCE {
            return Err(Error::InvalidConfig(
                "image too narrow for a caption".into(),
            ));
        }
        if self.train_per_class + self.heldout_per_class == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(())
    }

    /// First row of the caption band.
    pub fn band_start(&self) -> usize {
        self.height - self.caption_rows
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub spec: DatasetSpec,
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    /// Index (see [`DatasetSpec::caption_word`]) of the word written in each
    /// image.
    pub caption_labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Seed of each image's background texture, used to repaint the band.
    pub texture_seeds: Vec<u64>,
    /// Whether caption blocks have been painted over.
    pub stripped: bool,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn indices(&self, split: Option<Split>) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| split.is_none_or(|s| self.splits[i] == s))
            .collect()
    }

    /// Inputs and labels at `indices`.
    pub fn select(&self, indices: &[usize]) -> (Vec<&Tensor>, Vec<usize>) {
        (
            indices.iter().map(|&i| &self.inputs[i]).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn split(&self, split: Split) -> (Vec<&Tensor>, Vec<usize>) {
        self.select(&self.indices(Some(split)))
    }

    /// Indices of `class` images, optionally restricted to one split.
    pub fn class_indices(&self, class: usize, split: Option<Split>) -> Vec<usize> {
        self.indices(split)
            .into_iter()
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    /// Fraction of images whose caption names their own class.
    pub fn caption_agreement_rate(&self) -> f64 {
        let agree = self
            .labels
            .iter()
            .zip(&self.caption_labels)
            .filter(|(a, b)| a == b)
            .count();
        agree as f64 / self.len().max(1) as f64
    }

    /// Checks per-sample bookkeeping for datasets assembled from files.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.inputs.len();
        for len in [
            self.labels.len(),
            self.caption_labels.len(),
            self.splits.len(),
            self.texture_seeds.len(),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        let shape = self.spec.image_shape();
        for x in &self.inputs {
            if x.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "dataset image",
                    lhs: shape.clone(),
                    rhs: x.shape().to_vec(),
                });
            }
        }
        let k = self.spec.num_classes();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(Error::ClassOutOfRange {
                class: bad,
                num_classes: k,
            });
        }
        let v = self.spec.caption_alphabet_len();
        if let Some(&bad) = self.caption_labels.iter().find(|&&w| w >= v) {
            return Err(Error::InvalidConfig(format!(
                "caption index {bad} outside vocabulary"
            )));
        }
        Ok(())
    }
}

/// Paints the caption block for `word` into an HWC image buffer.
fn draw_caption(pixels: &mut [f64], spec: &DatasetSpec, word: &str) {
    let (h, w) = (spec.height, spec.width);
    let top = spec.band_start();
    let block_w = glyph::block_width(word).min(w);
    // letters sit on the last GLYPH_ROWS rows of the band
    let letter_top = h - glyph::GLYPH_ROWS;
    for y in top..h {
        for x in 0..block_w {
            let on = y >= letter_top && {
                let rel = x.wrapping_sub(1);
                let (letter, col) = (rel / glyph::ADVANCE, rel % glyph::ADVANCE);
                x >= 1
                    && col < glyph::GLYPH_COLS
                    && letter < word.len()
                    && glyph::lit(word.as_bytes()[letter], y - letter_top, col)
            };
            if on {
                let base = (y * w + x) * CHANNELS;
                pixels[base..base + CHANNELS].fill(1.0);
            }
        }
    }
}

/// Generates the captioned dataset. Deterministic in `spec`.
pub fn generate_controlled(spec: &DatasetSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let per_class = spec.train_per_class + spec.heldout_per_class;
    let k = spec.num_classes();
    let shape = spec.image_shape();
    let mut ds = LabeledDataset {
        spec: spec.clone(),
        inputs: Vec::with_capacity(per_class * k),
        labels: Vec::with_capacity(per_class * k),
        caption_labels: Vec::with_capacity(per_class * k),
        splits: Vec::with_capacity(per_class * k),
        texture_seeds: Vec::with_capacity(per_class * k),
        stripped: false,
    };
    // interleave classes so any prefix is balanced
    for j in 0..per_class {
        for (class, &kind) in spec.classes.iter().enumerate() {
            let sample_seed = rng::derive_seed(rng::derive_seed(spec.seed, class as u64), j as u64);
            let texture_seed = rng::derive_seed(sample_seed, 0);
            let mut caption_rng = rng::stream(sample_seed, 1);
            let caption = if caption_rng.gen::<f64>() < spec.noise_p {
                let other = caption_rng.gen_range(0..spec.caption_alphabet_len() - 1);
                if other >= class {
                    other + 1
                } else {
                    other
                }
            } else {
                class
            };
            let mut pixels = texture::render(kind, texture_seed, spec.height, spec.width);
            draw_caption(
                &mut pixels,
                spec,
                spec.caption_word(caption).unwrap_or_default(),
            );
            ds.inputs.push(Tensor::from_parts(shape.clone(), pixels));
            ds.labels.push(class);
            ds.caption_labels.push(caption);
            ds.splits.push(if j < spec.train_per_class {
                Split::Train
            } else {
                Split::Heldout
            });
            ds.texture_seeds.push(texture_seed);
        }
    }
    Ok(ds)
}

/// Repaints each image's caption band with its own background texture.
pub fn strip_captions(ds: &LabeledDataset) -> LabeledDataset {
    let spec = &ds.spec;
    let top = spec.band_start() * spec.width * CHANNELS;
    let mut out = ds.clone();
    for (i, x) in out.inputs.iter_mut().enumerate() {
        let kind = spec.classes[ds.labels[i]];
        let background = texture::render(kind, ds.texture_seeds[i], spec.height, spec.width);
        let mut pixels = x.data().to_vec();
        pixels[top..].copy_from_slice(&background[top..]);
        *x = Tensor::from_parts(x.shape().to_vec(), pixels);
    }
    out.stripped = true;
    out
}

/// Caption-free images of `class`, at most `limit` of them.
pub fn concept_image_set(
    ds: &LabeledDataset,
    class: usize,
    limit: Option<usize>,
) -> Result<ConceptSet> {
    let k = ds.spec.num_classes();
    if class >= k {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: k,
        });
    }
    let mut picked: Vec<usize> = ds.class_indices(class, None);
    if let Some(limit) = limit {
        picked.truncate(limit);
    }
    if picked.is_empty() {
        return Err(Error::EmptySelection(format!("no images of class {class}")));
    }
    let subset = subset(ds, &picked);
    let stripped = strip_captions(&subset);
    let word = &ds.spec.vocabulary[class];
    ConceptSet::new(
        format!("image:{word}"),
        stripped.inputs,
        format!(
            "controlled seed={} p={} class={class} stripped",
            ds.spec.seed, ds.spec.noise_p
        ),
    )
}

/// Images captioned with `word`, keeping the caption band bit-exactly and
/// randomly permuting every other pixel (RGB triples move together).
pub fn concept_caption_set(
    ds: &LabeledDataset,
    word: usize,
    seed: u64,
    limit: Option<usize>,
) -> Result<ConceptSet> {
    let Some(text) = ds.spec.caption_word(word) else {
        return Err(Error::EmptySelection(format!("no caption word #{word}")));
    };
    let mut picked: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.caption_labels[i] == word)
        .collect();
    if let Some(limit) = limit {
        picked.truncate(limit);
    }
    if picked.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no images captioned `{text}`"
        )));
    }
    let band_px = ds.spec.band_start() * ds.spec.width;
    let examples = picked
        .iter()
        .enumerate()
        .map(|(n, &i)| shuffle_pixels(&ds.inputs[i], band_px, rng::derive_seed(seed, n as u64)))
        .collect();
    ConceptSet::new(
        format!("caption:{text}"),
        examples,
        format!(
            "controlled seed={} p={} caption={text} shuffle={seed}",
            ds.spec.seed, ds.spec.noise_p
        ),
    )
}

/// Permutes the first `count` pixels of an `[h, w, 3]` image as RGB triples,
/// leaving the rest bit-exact.
pub fn shuffle_pixels(image: &Tensor, count: usize, seed: u64) -> Tensor {
    let src = image.data();
    let count = count.min(src.len() / CHANNELS);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut pixels = src.to_vec();
    for (dst, &from) in order.iter().enumerate() {
        pixels[dst * CHANNELS..(dst + 1) * CHANNELS]
            .copy_from_slice(&src[from * CHANNELS..(from + 1) * CHANNELS]);
    }
    Tensor::from_parts(image.shape().to_vec(), pixels)
}

fn subset(ds: &LabeledDataset, idx: &[usize]) -> LabeledDataset {
    LabeledDataset {
        spec: ds.spec.clone(),
        inputs: idx.iter().map(|&i| ds.inputs[i].clone()).collect(),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        caption_labels: idx.iter().map(|&i| ds.caption_labels[i]).collect(),
        splits: idx.iter().map(|&i| ds.splits[i]).collect(),
        texture_seeds: idx.iter().map(|&i| ds.texture_seeds[i]).collect(),
        stripped: ds.stripped,
    }
}

/// Default number of examples per generated concept.
pub const DEFAULT_CONCEPT_SIZE: usize = 30;

/// One procedural concept set per name, `n` examples each. Every set draws
/// fresh phases, frequencies and colors per example, except `solid`, whose
/// members share one saturated base color (a corner of the RGB cube) drawn
/// per set.
pub fn generate_texture_concepts(
    names: &[&str],
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<Vec<ConceptSet>> {
    if n < 2 {
        return Err(Error::InsufficientExamples { needed: 2, got: n });
    }
    names
        .iter()
        .map(|name| {
            let kind: TextureKind = name.parse()?;
            let set_seed = rng::derive_seed(seed, 1000 + kind as u64);
            let base: [f64; 3] = {
                let mut r = rng::stream(set_seed, u64::MAX);
                core::array::from_fn(|_| if r.gen::<bool>() { 0.9 } else { 0.1 })
            };
            let examples = (0..n)
                .map(|j| {
                    let s = rng::derive_seed(set_seed, j as u64);
                    let pixels = match kind {
                        TextureKind::Solid => texture::render_tinted(base, s, height, width),
                        _ => texture::render(kind, s, height, width),
                    };
                    Tensor::from_parts(vec![height, width, CHANNELS], pixels)
                })
                .collect();
            ConceptSet::new(
                kind.name(),
                examples,
                format!("texture {} seed={seed} n={n}", kind.name()),
            )
        })
        .collect()
}

/// A pool of "random" images mixing the given texture kinds round-robin.
pub fn random_pool(
    kinds: &[TextureKind],
    n: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<ConceptSet> {
    if kinds.is_empty() {
        return Err(Error::InvalidConfig(
            "random pool needs at least one texture kind".into(),
        ));
    }
    let examples = (0..n)
        .map(|j| {
            let kind = kinds[j % kinds.len()];
            let s = rng::derive_seed(rng::derive_seed(seed, 2000), j as u64);
            Tensor::from_parts(
                vec![height, width, CHANNELS],
                texture::render(kind, s, height, width),
            )
        })
        .collect();
    ConceptSet::new("random", examples, format!("random pool seed={seed} n={n}"))
}
