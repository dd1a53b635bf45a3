//! File formats, the command-line interface and the caption-noise
//! experiment harness around [`tcav_core`].
//!
//! - [`tnsr`]: TNSR tensor blocks.
//! - [`checkpoint`]: CAVM model checkpoints.
//! - [`ppm`]: P6 images, heatmaps and contact sheets.
//! - [`store`]: concept directories, dataset directories, CAV documents and
//!   report bundles.
//! - [`manifest`]: per-invocation run manifests with SHA-256 digests.
//! - [`experiment`]: the end-to-end caption-noise experiment.
//! - [`cli`]: the `tcav` binary.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod ppm;
pub mod store;
pub mod tnsr;

pub use error::{Error, Result};
pub use tcav_core as core;
