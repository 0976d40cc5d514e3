//! Flattening a layer stack into the condition maps the model consumes.
//!
//! Content pieces are alpha-composited (source-over) onto the base image in
//! z-order. Control layers reduce to at most one map per kind: a binary
//! region mask, an edge map and a low-frequency color map.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attention::CueId;
use crate::edges::{canny, CannyParams};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::raster::{png_b64, Mask, Raster};

/// Default opacity of a color stroke.
pub const DEFAULT_STROKE_ALPHA: f64 = 0.4;

/// Side length of the grid a color map is averaged down to.
pub const COLOR_GRID: usize = 16;

/// The kinds of control cue a stack can produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKind {
    Spatial,
    Structural,
    Color,
}

impl CueKind {
    pub const ALL: [CueKind; 3] = [CueKind::Spatial, CueKind::Structural, CueKind::Color];

    pub fn cue_id(self) -> CueId {
        CueId(self as u32)
    }

    pub fn from_cue_id(id: CueId) -> Option<CueKind> {
        CueKind::ALL.get(id.0 as usize).copied()
    }
}

impl fmt::Display for CueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CueKind::Spatial => "spatial",
            CueKind::Structural => "structural",
            CueKind::Color => "color",
        })
    }
}

/// Pixels within `radius` of the polyline (a swept disc), on a
/// `width × height` grid whose pixel `(x, y)` sits at integer coordinates.
pub fn rasterize_stroke(points: &[[f64; 2]], radius: f64, width: usize, height: usize) -> Result<Mask> {
    if points.is_empty() {
        return Err(invalid("stroke needs at least one point"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(invalid(format!("stroke radius must be positive, got {radius}")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("stroke points must be finite"));
    }
    let mut mask = Mask::new(width, height);
    let segments: Vec<([f64; 2], [f64; 2])> = if points.len() == 1 {
        vec![(points[0], points[0])]
    } else {
        points.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let r2 = radius * radius;
    for (a, b) in segments {
        let x0 = (a[0].min(b[0]) - radius).floor().max(0.0);
        let x1 = (a[0].max(b[0]) + radius).ceil().min(width as f64 - 1.0);
        let y0 = (a[1].min(b[1]) - radius).floor().max(0.0);
        let y1 = (a[1].max(b[1]) + radius).ceil().min(height as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if segment_dist2([x as f64, y as f64], a, b) <= r2 {
                    mask.set(x, y, true);
                }
            }
        }
    }
    Ok(mask)
}

fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    (p[0] - cx).powi(2) + (p[1] - cy).powi(2)
}

/// Applies subtract strokes, then add strokes, to an edge map:
/// `E_sub = E ⊙ (1 − M_sub)`, `E_cond = E_sub + M_add ⊙ (1 − E_sub)`.
pub fn composite_edge(edges: &Raster, add: &Mask, sub: &Mask) -> Result<Raster> {
    if edges.channels() != 1 {
        return Err(invalid("edge map must be single-channel"));
    }
    for m in [add, sub] {
        if m.size() != edges.size() {
            return Err(shape_mismatch(edges.size(), m.size()));
        }
    }
    if !edges.in_unit_range() {
        return Err(invalid("edge map values must lie in [0, 1]"));
    }
    Ok(Raster::from_fn(edges.width(), edges.height(), 1, |x, y, _| {
        let e = edges.get(x, y, 0);
        let m_sub = if sub.get(x, y) { 1.0 } else { 0.0 };
        let m_add = if add.get(x, y) { 1.0 } else { 0.0 };
        let e_sub = e * (1.0 - m_sub);
        e_sub + m_add * (1.0 - e_sub)
    }))
}

/// One painted color stroke: region, target color and opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorStroke {
    pub mask: Mask,
    pub color: [f64; 3],
    pub alpha: f64,
}

impl ColorStroke {
    pub fn new(mask: Mask, color: [f64; 3]) -> Self {
        Self { mask, color, alpha: DEFAULT_STROKE_ALPHA }
    }
}

/// Alpha-blends strokes in order: `C ← (1 − α·M) ⊙ C + α·M·c` per channel.
pub fn composite_color(colors: &Raster, strokes: &[ColorStroke]) -> Result<Raster> {
    if colors.channels() != 3 {
        return Err(invalid("color map must be RGB"));
    }
    for s in strokes {
        if s.mask.size() != colors.size() {
            return Err(shape_mismatch(colors.size(), s.mask.size()));
        }
        if s.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid(format!("stroke color {:?} outside [0, 1]", s.color)));
        }
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(invalid(format!("stroke opacity {} outside [0, 1]", s.alpha)));
        }
    }
    let mut out = colors.clone();
    for s in strokes {
        for y in 0..out.height() {
            for x in 0..out.width() {
                let m = if s.mask.get(x, y) { 1.0 } else { 0.0 };
                let a = s.alpha * m;
                for (c, v) in out.pixel_mut(x, y).iter_mut().enumerate() {
                    *v = (1.0 - a) * *v + a * s.color[c];
                }
            }
        }
    }
    Ok(out)
}

/// Removes high-frequency detail from an RGB image: area-average down to a
/// 16×16 grid, then bilinear back up to `width × height`.
pub fn degrade_color_map(image: &Raster, width: usize, height: usize) -> Raster {
    image
        .to_rgb()
        .resize_area(COLOR_GRID, COLOR_GRID)
        .resize_bilinear(width, height)
}

/// A brush polyline for mask and edge strokes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<[f64; 2]>,
    pub radius: f64,
}

impl Stroke {
    pub fn rasterize(&self, width: usize, height: usize) -> Result<Mask> {
        rasterize_stroke(&self.points, self.radius, width, height)
    }
}

/// A color-brush polyline as received from a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaintStroke {
    pub points: Vec<[f64; 2]>,
    pub radius: f64,
    #[serde(with = "hex_color")]
    pub color: [f64; 3],
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_STROKE_ALPHA
}

impl PaintStroke {
    pub fn to_color_stroke(&self, width: usize, height: usize) -> Result<ColorStroke> {
        Ok(ColorStroke {
            mask: rasterize_stroke(&self.points, self.radius, width, height)?,
            color: self.color,
            alpha: self.alpha,
        })
    }
}

/// `#rrggbb` ↔ `[r, g, b]` in `[0, 1]`.
pub mod hex_color {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn to_hex(c: &[f64; 3]) -> String {
        let q = |v: f64| crate::raster::quantize(v);
        format!("#{:02x}{:02x}{:02x}", q(c[0]), q(c[1]), q(c[2]))
    }

    pub fn parse(s: &str) -> Option<[f64; 3]> {
        let h = s.strip_prefix('#').unwrap_or(s);
        if h.len() != 6 || !h.is_ascii() {
            return None;
        }
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = u8::from_str_radix(&h[2 * i..2 * i + 2], 16).ok()? as f64 / 255.0;
        }
        Some(out)
    }

    pub fn serialize<S: Serializer>(c: &[f64; 3], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&to_hex(c))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; 3], D::Error> {
        let s = String::deserialize(d)?;
        parse(&s).ok_or_else(|| D::Error::custom(format!("invalid hex color `{s}`")))
    }
}

/// Where a content piece lands: its center goes to `(x, y)` on the canvas,
/// after uniform scaling and a rotation (degrees, clockwise in image space).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub x: f64,
    pub y: f64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub rotation: f64,
}

fn one() -> f64 {
    1.0
}

impl Placement {
    /// Piece drawn 1:1 with its top-left corner at `(left, top)`.
    pub fn at(left: f64, top: f64, piece: &Raster) -> Self {
        Self {
            x: left + piece.width() as f64 / 2.0,
            y: top + piece.height() as f64 / 2.0,
            scale: 1.0,
            rotation: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || ![self.x, self.y, self.scale, self.rotation].iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("invalid placement {self:?}")));
        }
        Ok(())
    }

    /// Piece coordinates → canvas coordinates (continuous, pixel edges at integers).
    fn forward(&self, piece_size: (usize, usize), u: f64, v: f64) -> (f64, f64) {
        let (cx, cy) = (piece_size.0 as f64 / 2.0, piece_size.1 as f64 / 2.0);
        let (sin, cos) = self.rotation.to_radians().sin_cos();
        let (dx, dy) = ((u - cx) * self.scale, (v - cy) * self.scale);
        (self.x + cos * dx - sin * dy, self.y + sin * dx + cos * dy)
    }

    fn inverse(&self, piece_size: (usize, usize), px: f64, py: f64) -> (f64, f64) {
        let (cx, cy) = (piece_size.0 as f64 / 2.0, piece_size.1 as f64 / 2.0);
        let (sin, cos) = self.rotation.to_radians().sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        let (rx, ry) = (cos * dx + sin * dy, -sin * dx + cos * dy);
        (rx / self.scale + cx, ry / self.scale + cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Content {
        #[serde(with = "png_b64::raster")]
        piece: Raster,
        #[serde(default, with = "png_b64::mask_opt", skip_serializing_if = "Option::is_none")]
        piece_mask: Option<Mask>,
        placement: Placement,
    },
    Spatial {
        #[serde(default, with = "png_b64::mask_opt", skip_serializing_if = "Option::is_none")]
        mask: Option<Mask>,
        #[serde(default)]
        strokes: Vec<Stroke>,
    },
    Structural {
        #[serde(default, with = "png_b64::raster_opt", skip_serializing_if = "Option::is_none")]
        edges: Option<Raster>,
        #[serde(default)]
        add: Vec<Stroke>,
        #[serde(default)]
        subtract: Vec<Stroke>,
    },
    Color {
        #[serde(default, with = "png_b64::raster_opt", skip_serializing_if = "Option::is_none")]
        base: Option<Raster>,
        #[serde(default)]
        strokes: Vec<PaintStroke>,
    },
}

impl LayerKind {
    pub fn cue_kind(&self) -> Option<CueKind> {
        match self {
            LayerKind::Content { .. } => None,
            LayerKind::Spatial { .. } => Some(CueKind::Spatial),
            LayerKind::Structural { .. } => Some(CueKind::Structural),
            LayerKind::Color { .. } => Some(CueKind::Color),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "yes")]
    pub visible: bool,
}

fn yes() -> bool {
    true
}

impl Layer {
    pub fn new(id: impl Into<String>, kind: LayerKind) -> Self {
        Self { id: id.into(), kind, sigma: 1.0, visible: true }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(invalid(format!("layer `{}`: strength must be finite and ≥ 0", self.id)));
        }
        let check_size = |size: (usize, usize)| {
            if size != (width, height) {
                Err(invalid(format!(
                    "layer `{}`: raster is {}x{}, canvas is {width}x{height}",
                    self.id, size.0, size.1
                )))
            } else {
                Ok(())
            }
        };
        let check_strokes = |strokes: &[Stroke]| -> Result<()> {
            for s in strokes {
                s.rasterize(1, 1)?;
            }
            Ok(())
        };
        match &self.kind {
            LayerKind::Content { piece, piece_mask, placement } => {
                placement.validate()?;
                if piece.width() == 0 || piece.height() == 0 {
                    return Err(invalid(format!("layer `{}`: empty piece", self.id)));
                }
                if let Some(m) = piece_mask {
                    if m.size() != piece.size() {
                        return Err(shape_mismatch(piece.size(), m.size()));
                    }
                }
            }
            LayerKind::Spatial { mask, strokes } => {
                if let Some(m) = mask {
                    check_size(m.size())?;
                }
                check_strokes(strokes)?;
            }
            LayerKind::Structural { edges, add, subtract } => {
                if let Some(e) = edges {
                    check_size(e.size())?;
                }
                check_strokes(add)?;
                check_strokes(subtract)?;
            }
            LayerKind::Color { base, strokes } => {
                if let Some(b) = base {
                    check_size(b.size())?;
                }
                for s in strokes {
                    if !(0.0..=1.0).contains(&s.alpha) {
                        return Err(invalid(format!("layer `{}`: opacity {} outside [0, 1]", self.id, s.alpha)));
                    }
                    rasterize_stroke(&s.points, s.radius, 1, 1)?;
                }
            }
        }
        Ok(())
    }
}

/// Ordered layers over an `H × W` canvas; list order is z-order (last on top).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, layers: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn layer_mut(&mut self, id: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(invalid("canvas must be non-empty"));
        }
        for l in &self.layers {
            l.validate(self.width, self.height)?;
        }
        Ok(())
    }

    fn visible(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.visible)
    }
}

/// Everything a generation call needs from a stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Flattened {
    /// Composited RGB input image `y`.
    pub image: Raster,
    pub mask: Option<Mask>,
    pub edges: Option<Raster>,
    pub colors: Option<Raster>,
    /// Strength of each present cue, from the topmost visible layer of its kind.
    pub strengths: BTreeMap<CueKind, f64>,
}

/// Source-over composite of a placed piece onto `canvas` (RGB).
pub fn place_piece(
    canvas: &mut Raster,
    piece: &Raster,
    piece_mask: Option<&Mask>,
    placement: &Placement,
    layer_id: &str,
) -> Result<()> {
    placement.validate()?;
    let psize = piece.size();
    let corners = [(0.0, 0.0), (psize.0 as f64, 0.0), (psize.0 as f64, psize.1 as f64), (0.0, psize.1 as f64)]
        .map(|(u, v)| placement.forward(psize, u, v));
    let (min_x, max_x) = minmax(corners.iter().map(|c| c.0));
    let (min_y, max_y) = minmax(corners.iter().map(|c| c.1));
    let (w, h) = (canvas.width() as f64, canvas.height() as f64);
    if max_x <= 0.0 || max_y <= 0.0 || min_x >= w || min_y >= h {
        return Err(Error::LayerOutOfBounds(layer_id.to_string()));
    }

    // premultiplied RGBA
    let premul = Raster::from_fn(psize.0, psize.1, 4, |x, y, c| {
        let mut a = if piece.channels() == 4 || piece.channels() == 2 {
            piece.get(x, y, piece.channels() - 1)
        } else {
            1.0
        };
        if let Some(m) = piece_mask {
            if !m.get(x, y) {
                a = 0.0;
            }
        }
        if c == 3 {
            a
        } else {
            let v = if piece.channels() >= 3 { piece.get(x, y, c) } else { piece.get(x, y, 0) };
            v * a
        }
    });

    let x0 = min_x.floor().max(0.0) as usize;
    let x1 = (max_x.ceil().min(w) as usize).min(canvas.width());
    let y0 = min_y.floor().max(0.0) as usize;
    let y1 = (max_y.ceil().min(h) as usize).min(canvas.height());
    let mut src = [0.0; 4];
    for y in y0..y1 {
        for x in x0..x1 {
            let (u, v) = placement.inverse(psize, x as f64 + 0.5, y as f64 + 0.5);
            if !premul.sample_bilinear_zero(u - 0.5, v - 0.5, &mut src) {
                continue;
            }
            let a = src[3].clamp(0.0, 1.0);
            if a == 0.0 {
                continue;
            }
            for (c, d) in canvas.pixel_mut(x, y).iter_mut().take(3).enumerate() {
                *d = (src[c] + (1.0 - a) * *d).clamp(0.0, 1.0);
            }
        }
    }
    Ok(())
}

fn minmax(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Reduces a stack over `base` to the model's inputs.
///
/// Content layers composite onto the base in z-order. Control layers of the
/// same kind fold in z-order: a structural layer without its own edge map
/// starts from Canny edges of the composited image, and a color layer without
/// its own base starts from the degraded composited image. Hidden layers are
/// skipped entirely.
pub fn flatten(base: &Raster, stack: &LayerStack) -> Result<Flattened> {
    flatten_with(base, stack, &CannyParams::default())
}

pub fn flatten_with(base: &Raster, stack: &LayerStack, canny_params: &CannyParams) -> Result<Flattened> {
    stack.validate()?;
    if base.size() != (stack.width, stack.height) {
        return Err(shape_mismatch((stack.width, stack.height), base.size()));
    }
    let (w, h) = (stack.width, stack.height);
    let mut image = base.to_rgb();
    for layer in stack.visible() {
        if let LayerKind::Content { piece, piece_mask, placement } = &layer.kind {
            place_piece(&mut image, piece, piece_mask.as_ref(), placement, &layer.id)?;
        }
    }

    let spatial: Vec<&Layer> = stack.visible().filter(|l| matches!(l.kind, LayerKind::Spatial { .. })).collect();
    if spatial.len() > 1 {
        return Err(Error::MultipleSpatialLayers(spatial.len()));
    }

    let mut mask: Option<Mask> = None;
    let mut edges: Option<Raster> = None;
    let mut colors: Option<Raster> = None;
    let mut strengths = BTreeMap::new();
    for layer in stack.visible() {
        match &layer.kind {
            LayerKind::Content { .. } => continue,
            LayerKind::Spatial { mask: m, strokes } => {
                let mut acc = m.clone().unwrap_or_else(|| Mask::new(w, h));
                for s in strokes {
                    acc.union_in_place(&s.rasterize(w, h)?)?;
                }
                mask = Some(acc);
            }
            LayerKind::Structural { edges: e, add, subtract } => {
                let current = match (e, edges.take()) {
                    (Some(e), _) => e.channel(0),
                    (None, Some(prev)) => prev,
                    (None, None) => canny(&image, canny_params)?,
                };
                let add_mask = union_strokes(add, w, h)?;
                let sub_mask = union_strokes(subtract, w, h)?;
                edges = Some(composite_edge(&current, &add_mask, &sub_mask)?);
            }
            LayerKind::Color { base: b, strokes } => {
                let current = match (b, colors.take()) {
                    (Some(b), _) => b.to_rgb(),
                    (None, Some(prev)) => prev,
                    (None, None) => degrade_color_map(&image, w, h),
                };
                let strokes = strokes
                    .iter()
                    .map(|s| s.to_color_stroke(w, h))
                    .collect::<Result<Vec<_>>>()?;
                colors = Some(composite_color(&current, &strokes)?);
            }
        }
        if let Some(kind) = layer.kind.cue_kind() {
            strengths.insert(kind, layer.sigma);
        }
    }
    Ok(Flattened { image, mask, edges, colors, strengths })
}

fn union_strokes(strokes: &[Stroke], w: usize, h: usize) -> Result<Mask> {
    let mut m = Mask::new(w, h);
    for s in strokes {
        m.union_in_place(&s.rasterize(w, h)?)?;
    }
    Ok(m)
}
