//! The synthetic colour-map task: targets are smooth random colour fields,
//! the colour cue is their degraded colour map.

use layered_core::attention::ZeroStrengthMode;
use layered_core::compositor::{degrade_color_map, CueKind};
use layered_core::metrics::l1;
use layered_core::Raster;
use rand::Rng;

use crate::config::ToyModelConfig;
use crate::error::{DitError, Result};
use crate::flow::{sample, seeded_noise};
use crate::model::{Conditioning, ToyDit};
use crate::train::TrainExample;

pub const COLOR_TASK: usize = 0;

/// A `size × size` RGB field: a random `4 × 4` colour grid, bilinearly upsampled.
pub fn smooth_color_field(size: usize, rng: &mut impl Rng) -> Raster {
    let coarse = Raster::from_fn(4, 4, 3, |_, _, _| rng.random::<f64>());
    coarse.resize_bilinear(size, size)
}

pub fn color_cue(cfg: &ToyModelConfig, image: &Raster) -> Raster {
    degrade_color_map(image, cfg.cue_resolution, cfg.cue_resolution)
}

pub fn color_example(cfg: &ToyModelConfig, rng: &mut impl Rng) -> TrainExample {
    let x = smooth_color_field(cfg.image_size, rng);
    let cue = color_cue(cfg, &x);
    TrainExample { x, cond: Conditioning::new(COLOR_TASK).with_cue(CueKind::Color, cue, 1.0) }
}

pub fn color_dataset(cfg: &ToyModelConfig, n: usize, rng: &mut impl Rng) -> Vec<TrainExample> {
    (0..n).map(|_| color_example(cfg, rng)).collect()
}

/// Mean L1 between `degrade_color_map(sample)` and the cue over `examples`,
/// sampled once with the cue at σ = 1 and once at σ = 0 in strict mode.
/// Example `i` uses noise seed `noise_seed + i` for both runs.
pub fn cue_adherence(model: &ToyDit, examples: &[TrainExample], noise_seed: u64, steps: usize) -> Result<(f64, f64)> {
    let cfg = model.config();
    let n = examples.len() as f64;
    let (mut on, mut off) = (0.0, 0.0);
    for (i, ex) in examples.iter().enumerate() {
        let cue = ex
            .cond
            .cues
            .iter()
            .find(|c| c.kind == CueKind::Color)
            .ok_or_else(|| DitError::Input("example has no colour cue".into()))?;
        let noise = seeded_noise(cfg.image_size, cfg.image_size, cfg.channels, noise_seed + i as u64);
        for (sigma, acc) in [(1.0, &mut on), (0.0, &mut off)] {
            let mut cond = ex.cond.clone().with_mode(ZeroStrengthMode::Strict);
            cond.set_sigma(CueKind::Color, sigma);
            let img = sample(model, &cond, steps, &noise)?;
            *acc += l1(&color_cue(cfg, &img), &cue.map)? / n;
        }
    }
    Ok((on, off))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fields_are_in_range_and_smooth() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = smooth_color_field(16, &mut rng);
        assert!(f.in_unit_range());
        for y in 0..16 {
            for x in 0..15 {
                assert!((f.get(x, y, 0) - f.get(x + 1, y, 0)).abs() < 0.3);
            }
        }
    }
}
