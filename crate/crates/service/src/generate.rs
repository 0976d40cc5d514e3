use layered_core::attention::ZeroStrengthMode;
use layered_core::compositor::{CueKind, Flattened};
use layered_core::Raster;
use layered_dit::task::COLOR_TASK;
use layered_dit::{sample, seeded_noise, Conditioning, ToyDit};

pub const MAX_STEPS: usize = 1000;

/// Maps a flattened stack onto the toy model's inputs: the composite is the
/// context image and every present map becomes a cue with its layer's σ.
pub fn conditioning(model: &ToyDit, flat: &Flattened, strict: bool) -> Conditioning {
    let s = model.config().image_size;
    let mode = if strict { ZeroStrengthMode::Strict } else { ZeroStrengthMode::Verbatim };
    let mut cond = Conditioning::new(COLOR_TASK).with_context(flat.image.resize_area(s, s)).with_mode(mode);
    let maps: [(CueKind, Option<Raster>); 3] = [
        (CueKind::Spatial, flat.mask.as_ref().map(|m| m.to_raster())),
        (CueKind::Structural, flat.edges.clone()),
        (CueKind::Color, flat.colors.clone()),
    ];
    for (kind, map) in maps {
        if let Some(map) = map {
            let sigma = flat.strengths.get(&kind).copied().unwrap_or(1.0);
            cond = cond.with_cue(kind, model.prepare_cue(kind, &map), sigma);
        }
    }
    cond
}

/// Samples at model resolution and resizes the result to the canvas.
pub fn generate(model: &ToyDit, flat: &Flattened, seed: u64, steps: usize, strict: bool) -> layered_dit::Result<Raster> {
    let cfg = model.config();
    let noise = seeded_noise(cfg.image_size, cfg.image_size, cfg.channels, seed);
    let out = sample(model, &conditioning(model, flat, strict), steps, &noise)?;
    let (w, h) = flat.image.size();
    Ok(out.resize_bilinear(w, h).clamp01())
}
