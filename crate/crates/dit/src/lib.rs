//! A toy multi-stream diffusion transformer trained with rectified flow.
//!
//! Images are patchified pixels, a handful of learned task tokens stand in
//! for text, and visual cues enter as extra token streams whose influence is
//! scaled through the attention bias.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod model;
pub mod tape;
pub mod task;
pub mod train;

pub use config::ToyModelConfig;
pub use error::{DitError, Result};
pub use flow::{integrate, rf_interpolate, rf_target, sample, seeded_noise, VelocityModel};
pub use model::{Conditioning, CueInput, ToyDit};
pub use train::{rf_loss, train, TrainConfig, TrainExample, TrainReport};
