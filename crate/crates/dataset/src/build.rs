//! Pure sample builders. Each returns the manifest record together with
//! the encoded PNG files it references, so the same rendering code serves
//! both building and replay.

use layered_core::augment::{AugmentRecord, ForegroundPiece};
use layered_core::compositor::{degrade_color_map, Stroke};
use layered_core::edges::{CannyExtractor, EdgeExtractor, ExtractorRegistry, FileExtractor};
use layered_core::mask::{self, derive_mask, prescreen, MaskOutcome, MaskParams};
use layered_core::{Mask, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DatasetConfig;
use crate::error::{DatasetError, Result, WithId};
use crate::record::{ManifestRecord, Params, Pipeline};

/// Identity of one sample within a build.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub id: String,
    pub source: String,
    pub seed: u64,
    pub index: u64,
}

impl SampleMeta {
    pub fn new(pipeline: Pipeline, source: &str, seed: u64, index: u64) -> Self {
        Self { id: format!("{pipeline}-{index:05}-{source}"), source: source.to_string(), seed, index }
    }

    /// The sample's private RNG: stream `index` of the build seed.
    pub fn rng(&self) -> ChaCha8Rng {
        sample_rng(self.seed, self.index)
    }

    fn file(&self, role: &str) -> String {
        format!("{}_{role}.png", self.id)
    }
}

pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A record plus its files as `(relative path, PNG bytes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: ManifestRecord,
    pub files: Vec<(String, Vec<u8>)>,
}

impl Sample {
    pub fn file(&self, path: &str) -> Option<&[u8]> {
        self.files.iter().find(|(p, _)| p == path).map(|(_, b)| b.as_slice())
    }
}

fn base_record(meta: &SampleMeta, caption: &str, params: Params) -> ManifestRecord {
    ManifestRecord {
        id: meta.id.clone(),
        source: meta.source.clone(),
        seed: meta.seed,
        index: meta.index,
        caption: caption.to_string(),
        target: meta.file("target"),
        input: None,
        fg_mask: None,
        background_mask: None,
        mask: None,
        cue: None,
        params,
    }
}

fn png(r: &Raster, id: &str) -> Result<Vec<u8>> {
    r.to_png_bytes().with_id(id)
}

fn png_mask(m: &Mask, id: &str) -> Result<Vec<u8>> {
    m.to_png_bytes().with_id(id)
}

// ---------------------------------------------------------------- content

/// Pixels farther than `margin` from the foreground bounding box.
pub fn background_region(fg_mask: &Mask, margin: usize) -> Mask {
    let (w, h) = fg_mask.size();
    match fg_mask.bbox() {
        None => Mask::full(w, h),
        Some((x0, y0, x1, y1)) => {
            let (bx0, by0) = (x0.saturating_sub(margin), y0.saturating_sub(margin));
            let (bx1, by1) = (x1 + margin, y1 + margin);
            Mask::from_fn(w, h, |x, y| x < bx0 || x > bx1 || y < by0 || y > by1)
        }
    }
}

/// 1 to N random polylines anywhere on the canvas; they are clipped to the
/// background region at render time.
pub fn sample_background_strokes(width: usize, height: usize, cfg: &DatasetConfig, rng: &mut impl Rng) -> Vec<Stroke> {
    let [lo, hi] = cfg.background_masks;
    let count = rng.random_range(lo..=hi);
    let side = width.min(height) as f64;
    (0..count)
        .map(|_| {
            let n = rng.random_range(2..=5);
            let points = (0..n)
                .map(|_| [rng.random_range(0.0..width as f64), rng.random_range(0.0..height as f64)])
                .collect();
            let radius = (side * rng.random_range(cfg.brush_radius[0]..=cfg.brush_radius[1])).max(1.0);
            Stroke { points, radius }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentRender {
    pub input: Raster,
    pub background_mask: Mask,
}

/// Deterministic half of the content pipeline: augment, paste back at the
/// original position, then gray out the background strokes.
pub fn render_content(
    source: &Raster,
    fg_mask: &Mask,
    augmentation: &AugmentRecord,
    strokes: &[Stroke],
    margin: usize,
    fill: f64,
) -> layered_core::Result<ContentRender> {
    let (w, h) = source.size();
    let piece = ForegroundPiece::extract(source, fg_mask)?;
    let augmented = augmentation.apply(&piece)?;
    let mut input = source.clone();
    augmented.composite_into(&mut input);
    let mut painted = Mask::new(w, h);
    for s in strokes {
        painted.union_in_place(&s.rasterize(w, h)?)?;
    }
    let background_mask = painted.intersection(&background_region(fg_mask, margin))?;
    for y in 0..h {
        for x in 0..w {
            if background_mask.get(x, y) {
                input.pixel_mut(x, y).iter_mut().for_each(|v| *v = fill);
            }
        }
    }
    Ok(ContentRender { input, background_mask })
}

pub fn build_content_sample(
    meta: &SampleMeta,
    source: &Raster,
    fg_mask: &Mask,
    caption: &str,
    cfg: &DatasetConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let id = meta.id.as_str();
    let source = source.to_rgb();
    if fg_mask.is_empty() {
        return Err(DatasetError::Sample { id: id.into(), source: layered_core::Error::InvalidArgument("foreground mask is empty".into()) });
    }
    let (w, h) = source.size();
    let piece = ForegroundPiece::extract(&source, fg_mask).with_id(id)?;
    let augmentation = AugmentRecord::sample(&piece, cfg.augment_probability, rng).with_id(id)?;
    let strokes = sample_background_strokes(w, h, cfg, rng);
    let margin = cfg.margin_for(w, h);
    let render = render_content(&source, fg_mask, &augmentation, &strokes, margin, cfg.background_fill).with_id(id)?;

    let params = Params::Content {
        augmentation,
        background_strokes: strokes,
        bbox_margin: margin,
        background_fill: cfg.background_fill,
    };
    let mut record = base_record(meta, caption, params);
    record.input = Some(meta.file("input"));
    record.fg_mask = Some(meta.file("fg_mask"));
    record.background_mask = Some(meta.file("background_mask"));
    let files = vec![
        (record.target.clone(), png(&source, id)?),
        (meta.file("input"), png(&render.input, id)?),
        (meta.file("fg_mask"), png_mask(fg_mask, id)?),
        (meta.file("background_mask"), png_mask(&render.background_mask, id)?),
    ];
    Ok(Sample { record, files })
}

// ------------------------------------------------------- structural / color

/// Canny plus any configured file-backed extractors.
pub fn registry(cfg: &DatasetConfig) -> ExtractorRegistry {
    let mut r = ExtractorRegistry::with_canny(cfg.canny);
    for e in &cfg.extractors {
        r.register(Box::new(FileExtractor { name: e.name.clone(), dir: e.dir.clone() }));
    }
    r
}

pub fn build_structural_sample(
    meta: &SampleMeta,
    image: &Raster,
    caption: &str,
    cfg: &DatasetConfig,
    registry: &ExtractorRegistry,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let id = meta.id.as_str();
    let image = image.to_rgb();
    let extractor = registry.pick(rng).with_id(id)?;
    let cue = extractor.extract(&image, &meta.source).with_id(id)?;
    let canny = (extractor.name() == "canny").then_some(cfg.canny);
    let mut record = base_record(meta, caption, Params::Structural { extractor: extractor.name().to_string(), canny });
    record.cue = Some(meta.file("cue"));
    let files = vec![(record.target.clone(), png(&image, id)?), (meta.file("cue"), png(&cue, id)?)];
    Ok(Sample { record, files })
}

/// Re-runs the extractor named in a structural record.
pub fn replay_structural_cue(image: &Raster, key: &str, extractor: &str, canny: Option<layered_core::edges::CannyParams>, cfg: &DatasetConfig) -> layered_core::Result<Raster> {
    match (extractor, canny) {
        ("canny", Some(params)) => CannyExtractor { params }.extract(image, key),
        (name, _) => registry(cfg)
            .get(name)
            .ok_or_else(|| layered_core::Error::InvalidArgument(format!("extractor `{name}` is not configured")))?
            .extract(image, key),
    }
}

pub fn color_cue(image: &Raster, cue_width: usize, cue_height: usize) -> Raster {
    degrade_color_map(image, cue_width, cue_height)
}

pub fn build_color_sample(meta: &SampleMeta, image: &Raster, caption: &str, cfg: &DatasetConfig) -> Result<Sample> {
    let id = meta.id.as_str();
    let image = image.to_rgb();
    let (w, h) = image.size();
    let (cw, ch) = cfg.color_cue_size.map_or((w, h), |s| (s, s));
    let cue = color_cue(&image, cw, ch);
    let mut record = base_record(meta, caption, Params::Color { cue_width: cw, cue_height: ch });
    record.cue = Some(meta.file("cue"));
    let files = vec![(record.target.clone(), png(&image, id)?), (meta.file("cue"), png(&cue, id)?)];
    Ok(Sample { record, files })
}

// ---------------------------------------------------------------- spatial

/// Why an input produced no record.
#[derive(Clone, Debug, PartialEq)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

/// `y` = source, `x` = edited, `M` = derived change mask. Pairs that fail
/// the prescreen or the ratio band come back as a rejection.
pub fn build_spatial_sample(
    meta: &SampleMeta,
    source: &Raster,
    edited: &Raster,
    caption: &str,
    cfg: &DatasetConfig,
) -> Result<std::result::Result<Sample, Rejection>> {
    let id = meta.id.as_str();
    let (source, edited) = (source.to_rgb(), edited.to_rgb());
    if cfg.prescreen && !prescreen(&source, &edited, cfg.mask.radius, cfg.mask.hull).with_id(id)?.passes() {
        return Ok(Err(Rejection { id: id.into(), reason: "failed the prescreen at every threshold".into() }));
    }
    let change = match derive_mask(&source, &edited, &cfg.mask).with_id(id)? {
        MaskOutcome::Accepted(c) => c,
        MaskOutcome::Rejected { reason, ratio, threshold } => {
            return Ok(Err(Rejection { id: id.into(), reason: format!("{reason} (ratio {ratio:.4} at threshold {threshold})") }));
        }
    };
    let mut record = base_record(meta, caption, Params::Spatial { mask_params: cfg.mask.clone(), mask_ratio: change.hull_area_ratio });
    record.input = Some(meta.file("input"));
    record.mask = Some(meta.file("mask"));
    let files = vec![
        (record.target.clone(), png(&edited, id)?),
        (meta.file("input"), png(&source, id)?),
        (meta.file("mask"), png_mask(&change.mask, id)?),
    ];
    Ok(Ok(Sample { record, files }))
}

/// The mask a spatial record should carry, or `None` if the pair would now
/// be rejected.
pub fn replay_spatial_mask(source: &Raster, edited: &Raster, params: &MaskParams) -> layered_core::Result<Option<Mask>> {
    Ok(derive_mask(source, edited, params)?.accepted().map(|c| c.mask))
}

// ---------------------------------------------------------------- removal

pub fn build_removal_sample(meta: &SampleMeta, image: &Raster, fg_mask: &Mask, caption: &str, rng: &mut impl Rng) -> Result<Sample> {
    let id = meta.id.as_str();
    let image = image.to_rgb();
    let pair = mask::synthesize_removal_pair(&image, fg_mask, rng).with_id(id)?;
    removal_sample(meta, caption, fg_mask, &pair)
}

pub(crate) fn removal_sample(meta: &SampleMeta, caption: &str, fg_mask: &Mask, pair: &mask::RemovalPair) -> Result<Sample> {
    let id = meta.id.as_str();
    let mut record = base_record(meta, caption, Params::Removal { offset: [pair.offset.0, pair.offset.1] });
    record.input = Some(meta.file("input"));
    record.mask = Some(meta.file("mask"));
    record.fg_mask = Some(meta.file("fg_mask"));
    let files = vec![
        (record.target.clone(), png(&pair.target, id)?),
        (meta.file("input"), png(&pair.input, id)?),
        (meta.file("mask"), png_mask(&pair.mask, id)?),
        (meta.file("fg_mask"), png_mask(fg_mask, id)?),
    ];
    Ok(Sample { record, files })
}

/// One input for the removal batch.
#[derive(Clone, Debug)]
pub struct RemovalInput {
    pub source: String,
    pub image: Raster,
    pub fg_mask: Mask,
    pub caption: String,
}

/// `n` removal records; record `k` uses input `k mod len` and RNG stream `k`.
pub fn build_removal_batch(inputs: &[RemovalInput], seed: u64, n: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(DatasetError::Insufficient("n must be at least 1".into()));
    }
    if inputs.is_empty() {
        return Err(DatasetError::Insufficient("no image/mask pairs".into()));
    }
    (0..n)
        .map(|k| {
            let inp = &inputs[k % inputs.len()];
            let meta = SampleMeta::new(Pipeline::Removal, &inp.source, seed, k as u64);
            build_removal_sample(&meta, &inp.image, &inp.fg_mask, &inp.caption, &mut meta.rng())
        })
        .collect()
}
