//! Concept activation vectors (CAVs) and TCAV scoring on a small,
//! self-contained neural-network stack.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs and explicit seeds; file formats, the CLI and the
//! end-to-end experiment harness live in the companion `tcav` crate.
//!
//! Layout:
//!
//! - [`tensor`], [`ops`], [`tape`]: dense f64 tensors and reverse-mode autodiff.
//! - [`model`]: layered classifiers with per-layer activation capture and
//!   layer-to-logit gradients.
//! - [`dataset`]: the captioned controlled dataset and procedural concept sets.
//! - [`cav`]: linear probes, CAVs, relative CAVs and per-layer probing.
//! - [`tcav`]: conceptual sensitivity, TCAV scores and significance testing.
//! - [`extras`]: concept sorting, activation maximization, saliency and FGSM.
//! - [`stats`]: t-tests and the Kolmogorov–Smirnov statistic.
//! - [`math`], [`rng`]: libm wrappers, vector helpers and seed derivation.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod cav;
pub mod dataset;
mod error;
pub mod extras;
pub mod math;
pub mod model;
pub mod ops;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tcav;
pub mod tensor;

pub use cav::{Cav, ProbeConfig};
pub use dataset::{ConceptSet, DatasetSpec, LabeledDataset};
pub use error::{Error, Result};
pub use model::{LayerKind, LayerSpec, LayeredModel, TrainConfig};
pub use tape::{Tape, Var};
pub use tcav::{SignificanceConfig, TcavReport};
pub use tensor::Tensor;

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
