//! Training-data construction for layered editing.
//!
//! Five pipelines turn plain inputs into manifest records:
//!
//! * `content`: the foreground is cut out, augmented, pasted back at its
//!   original position and the background is partly grayed out. The clean
//!   source is the target.
//! * `structural` / `color`: the image is the target and its edge map or
//!   coarse color map is the cue; there is no context image.
//! * `spatial`: a source/edited pair with a derived change mask.
//! * `removal`: the foreground is duplicated elsewhere and the clean image is
//!   the target.
//!
//! Builders are pure ([`build`]); every random choice is stored in the
//! record, and [`manifest::replay_manifest`] re-renders the derived files
//! from it for a byte-level comparison.

pub mod build;
pub mod config;
pub mod error;
pub mod manifest;
pub mod record;
pub mod run;

pub use build::{Rejection, Sample, SampleMeta};
pub use config::DatasetConfig;
pub use error::{DatasetError, Result};
pub use manifest::{read_manifest, replay_manifest, validate_manifest, write_dataset, ManifestWriter};
pub use record::{ManifestRecord, Params, Pipeline};
pub use run::{run_build, BuildRequest, BuildSummary};
