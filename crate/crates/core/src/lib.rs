//! Core building blocks for layered, cue-driven image editing.
//!
//! * [`attention`]: multi-stream attention with per-cue strength modulation.
//! * [`compositor`]: flattening a layer stack into condition maps.
//! * [`augment`]: foreground augmentations used to build training data.
//! * [`mask`]: change-mask derivation and removal-pair synthesis.
//! * [`edges`]: Canny edges and the edge-extractor registry.
//! * [`metrics`]: L1 / L2 / PSNR / SSIM.

pub mod attention;
pub mod augment;
pub mod compositor;
pub mod edges;
pub mod error;
pub mod mask;
pub mod exec;
pub mod metrics;
pub mod raster;

pub use error::{Error, Result};
pub use exec::Exec;
pub use raster::{Mask, Raster};
