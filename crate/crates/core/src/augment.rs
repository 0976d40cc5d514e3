//! Foreground augmentations: perspective warp, resolution degradation,
//! a multiplicative relight and white brush-stroke occlusion.
//!
//! Every augmentation is split into `sample_*` (draws a parameter record from
//! an RNG) and `apply_*` (deterministic given the record), so a stored record
//! replays bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compositor::{rasterize_stroke, Stroke};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::raster::{Mask, Raster};

pub const RHO_RANGE: (f64, f64) = (0.1, 0.3);
pub const SCALE_RANGE: (f64, f64) = (0.15, 0.9);
pub const LIGHTMAP_RANGE: (f64, f64) = (0.4, 1.6);
pub const RELIGHT_PROBS: [f64; 3] = [0.5, 0.3, 0.2];
pub const LOW_SATURATION_MAX: f64 = 0.2;
pub const HIGH_SATURATION_MAX: f64 = 0.8;
pub const MIN_STROKE_OVERLAP: f64 = 0.3;

/// A cut-out object: its pixels, its mask and where it sat in the source.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundPiece {
    pub image: Raster,
    pub mask: Mask,
    pub origin: (usize, usize),
}

impl ForegroundPiece {
    pub fn new(image: Raster, mask: Mask, origin: (usize, usize)) -> Result<Self> {
        if image.size() != mask.size() {
            return Err(shape_mismatch(image.size(), mask.size()));
        }
        if mask.is_empty() {
            return Err(invalid("foreground mask is empty"));
        }
        Ok(Self { image, mask, origin })
    }

    /// Crops the bounding box of `mask` out of `source`.
    pub fn extract(source: &Raster, mask: &Mask) -> Result<Self> {
        if source.size() != mask.size() {
            return Err(shape_mismatch(source.size(), mask.size()));
        }
        let (x0, y0, x1, y1) = mask.bbox().ok_or_else(|| invalid("foreground mask is empty"))?;
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let image = source.crop(x0, y0, w, h)?;
        let m = Mask::from_fn(w, h, |x, y| mask.get(x + x0, y + y0));
        Self::new(image, m, (x0, y0))
    }

    pub fn size(&self) -> (usize, usize) {
        self.image.size()
    }

    /// Writes the masked pixels back into `canvas` at `origin`; pixels that
    /// fall off the canvas are dropped. Returns the covered footprint.
    pub fn composite_into(&self, canvas: &mut Raster) -> Mask {
        let (cw, ch) = canvas.size();
        let (w, h) = self.size();
        let mut footprint = Mask::new(cw, ch);
        let c = canvas.channels().min(self.image.channels());
        for y in 0..h {
            for x in 0..w {
                let (tx, ty) = (x + self.origin.0, y + self.origin.1);
                if self.mask.get(x, y) && tx < cw && ty < ch {
                    for k in 0..c {
                        canvas.set(tx, ty, k, self.image.get(x, y, k));
                    }
                    footprint.set(tx, ty, true);
                }
            }
        }
        footprint
    }
}

/// Row-major 3×3 projective transform with `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]] }
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }

    pub fn inverse(&self) -> Result<Homography> {
        let d = self.det();
        if d.abs() <= 1e-9 {
            return Err(Error::DegenerateQuad);
        }
        let m = &self.m;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let s = adj[2][2];
        if s.abs() < 1e-300 {
            return Err(Error::DegenerateQuad);
        }
        Ok(Homography { m: adj.map(|row| row.map(|v| v / s)) })
    }
}

pub type Quad = [[f64; 2]; 4];

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = [a, b, c].iter().flatten().fold(1.0f64, |s, v| s.max(v.abs()));
    area.abs() <= 1e-12 * scale * scale
}

fn degenerate(q: &Quad) -> bool {
    (0..4).any(|skip| {
        let p: Vec<[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| q[i]).collect();
        collinear(p[0], p[1], p[2])
    })
}

/// Solves the 8-unknown linear system mapping `src[i]` to `dst[i]`.
pub fn solve_homography(src: &Quad, dst: &Quad) -> Result<Homography> {
    if degenerate(src) || degenerate(dst) {
        return Err(Error::DegenerateQuad);
    }
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v, v];
    }
    let scale = a.iter().flat_map(|r| r[..8].iter()).fold(0.0f64, |s, v| s.max(v.abs()));
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if a[piv][col].abs() <= 1e-12 * scale {
            return Err(Error::DegenerateQuad);
        }
        a.swap(col, piv);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [0.0f64; 8];
    for row in (0..8).rev() {
        let mut s = a[row][8];
        for k in row + 1..8 {
            s -= a[row][k] * h[k];
        }
        h[row] = s / a[row][row];
    }
    let hom = Homography { m: [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]] };
    if hom.det().abs() <= 1e-9 || !h.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateQuad);
    }
    Ok(hom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveParams {
    pub rho: f64,
    /// Unclipped corner offsets in `src` order: TL, TR, BR, BL.
    pub deltas: [[f64; 2]; 4],
}

impl PerspectiveParams {
    pub fn corners(w: usize, h: usize) -> Quad {
        let (w, h) = (w as f64, h as f64);
        [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
    }

    pub fn quads(&self, w: usize, h: usize) -> (Quad, Quad) {
        let src = Self::corners(w, h);
        let mut dst = src;
        for (d, delta) in dst.iter_mut().zip(&self.deltas) {
            d[0] = (d[0] + delta[0]).clamp(0.0, w as f64);
            d[1] = (d[1] + delta[1]).clamp(0.0, h as f64);
        }
        (src, dst)
    }
}

pub fn sample_perspective_with_rho(w: usize, h: usize, rho: f64, rng: &mut (impl Rng + ?Sized)) -> PerspectiveParams {
    let (dx, dy) = (w as f64 * rho, h as f64 * rho);
    let mut deltas = [[0.0; 2]; 4];
    for d in deltas.iter_mut() {
        d[0] = if dx > 0.0 { rng.random_range(-dx..=dx) } else { 0.0 };
        d[1] = if dy > 0.0 { rng.random_range(-dy..=dy) } else { 0.0 };
    }
    PerspectiveParams { rho, deltas }
}

pub fn sample_perspective(w: usize, h: usize, rng: &mut (impl Rng + ?Sized)) -> Result<PerspectiveParams> {
    if w < 2 || h < 2 {
        return Err(invalid(format!("perspective needs at least 2x2, got {w}x{h}")));
    }
    let rho = rng.random_range(RHO_RANGE.0..RHO_RANGE.1);
    Ok(sample_perspective_with_rho(w, h, rho, rng))
}

/// Inverse-mapped resampling: bilinear for the image, nearest for the mask.
/// Pixel `(x, y)` covers `[x, x+1) × [y, y+1)`; its center is mapped.
pub fn warp(piece: &ForegroundPiece, hom: &Homography) -> Result<ForegroundPiece> {
    let inv = hom.inverse()?;
    let (w, h) = piece.size();
    let c = piece.image.channels();
    let mut image = Raster::new(w, h, c);
    let mut mask = Mask::new(w, h);
    let mut buf = vec![0.0; c];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64 + 0.5, y as f64 + 0.5);
            if !(sx.is_finite() && sy.is_finite()) {
                continue;
            }
            if piece.image.sample_bilinear_zero(sx - 0.5, sy - 0.5, &mut buf) {
                image.pixel_mut(x, y).copy_from_slice(&buf);
            }
            let (nx, ny) = (sx.floor(), sy.floor());
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                mask.set(x, y, piece.mask.get(nx as usize, ny as usize));
            }
        }
    }
    Ok(ForegroundPiece { image, mask, origin: piece.origin })
}

pub fn apply_perspective(piece: &ForegroundPiece, params: &PerspectiveParams) -> Result<ForegroundPiece> {
    let (w, h) = piece.size();
    let (src, dst) = params.quads(w, h);
    warp(piece, &solve_homography(&src, &dst)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionParams {
    pub scale: f64,
}

pub fn sample_resolution(rng: &mut (impl Rng + ?Sized)) -> ResolutionParams {
    ResolutionParams { scale: rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1) }
}

/// Bilinear down to `scale`, then back up; the mask is untouched.
pub fn apply_resolution(piece: &ForegroundPiece, params: &ResolutionParams) -> Result<ForegroundPiece> {
    let (w, h) = piece.size();
    if (w.min(h) as f64) * SCALE_RANGE.0 < 1.0 {
        return Err(invalid(format!("piece {w}x{h} is too small for resolution degradation")));
    }
    if !(params.scale > 0.0 && params.scale <= 1.0) {
        return Err(invalid(format!("scale must be in (0, 1], got {}", params.scale)));
    }
    let dw = ((w as f64 * params.scale).round() as usize).max(1);
    let dh = ((h as f64 * params.scale).round() as usize).max(1);
    let image = piece.image.resize_bilinear(dw, dh).resize_bilinear(w, h);
    Ok(ForegroundPiece { image, mask: piece.mask.clone(), origin: piece.origin })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelightCategory {
    Grayscale,
    LowSaturation,
    HighSaturation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelightParams {
    pub category: RelightCategory,
    /// Intensity at the gradient midpoint.
    pub base: f64,
    /// Intensity change across the image along `angle`.
    pub slope: f64,
    pub angle: f64,
    /// Blob center in relative coordinates.
    pub blob_center: [f64; 2],
    /// Blob width relative to `max(w, h)`.
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub hue: f64,
    pub saturation: f64,
}

impl RelightParams {
    pub fn neutral() -> Self {
        Self {
            category: RelightCategory::Grayscale,
            base: 1.0,
            slope: 0.0,
            angle: 0.0,
            blob_center: [0.5, 0.5],
            blob_sigma: 0.3,
            blob_amplitude: 0.0,
            hue: 0.0,
            saturation: 0.0,
        }
    }
}

pub fn sample_relight_category(rng: &mut (impl Rng + ?Sized)) -> RelightCategory {
    let u: f64 = rng.random();
    if u < RELIGHT_PROBS[0] {
        RelightCategory::Grayscale
    } else if u < RELIGHT_PROBS[0] + RELIGHT_PROBS[1] {
        RelightCategory::LowSaturation
    } else {
        RelightCategory::HighSaturation
    }
}

pub fn sample_relight(rng: &mut (impl Rng + ?Sized)) -> RelightParams {
    let category = sample_relight_category(rng);
    let saturation = match category {
        RelightCategory::Grayscale => 0.0,
        RelightCategory::LowSaturation => rng.random_range(0.0..=LOW_SATURATION_MAX),
        RelightCategory::HighSaturation => rng.random_range(LOW_SATURATION_MAX..=HIGH_SATURATION_MAX),
    };
    RelightParams {
        category,
        base: rng.random_range(0.6..1.2),
        slope: rng.random_range(0.0..0.5),
        angle: rng.random_range(0.0..std::f64::consts::TAU),
        blob_center: [rng.random(), rng.random()],
        blob_sigma: rng.random_range(0.15..0.5),
        blob_amplitude: rng.random_range(-0.3..0.5),
        hue: rng.random_range(0.0..360.0),
        saturation,
    }
}

/// HSV with `v = 1` to RGB.
pub fn hsv_tint(hue: f64, saturation: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = saturation;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = 1.0 - c;
    [r + m, g + m, b + m]
}

/// Three-channel multiplicative field with values in [`LIGHTMAP_RANGE`].
pub fn lightmap(w: usize, h: usize, p: &RelightParams) -> Raster {
    let tint = if p.category == RelightCategory::Grayscale { [1.0; 3] } else { hsv_tint(p.hue, p.saturation) };
    let (dx, dy) = (p.angle.cos(), p.angle.sin());
    let size = w.max(h) as f64;
    let sigma = (p.blob_sigma * size).max(1e-6);
    let mut out = Raster::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 - 0.5;
            let v = (y as f64 + 0.5) / h as f64 - 0.5;
            let grad = p.base + p.slope * (u * dx + v * dy);
            let bx = x as f64 + 0.5 - p.blob_center[0] * w as f64;
            let by = y as f64 + 0.5 - p.blob_center[1] * h as f64;
            let blob = p.blob_amplitude * (-(bx * bx + by * by) / (2.0 * sigma * sigma)).exp();
            let intensity = grad + blob;
            for (c, t) in tint.iter().enumerate() {
                out.set(x, y, c, (intensity * t).clamp(LIGHTMAP_RANGE.0, LIGHTMAP_RANGE.1));
            }
        }
    }
    out
}

/// `clamp(image ⊙ lightmap)` on the colour channels.
pub fn apply_lightmap(piece: &ForegroundPiece, map: &Raster) -> Result<ForegroundPiece> {
    let (w, h) = piece.size();
    if map.size() != (w, h) || map.channels() != 3 {
        return Err(shape_mismatch((w, h, 3), (map.width(), map.height(), map.channels())));
    }
    let mut image = piece.image.clone();
    let c = image.channels().min(3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let v = image.get(x, y, k) * map.get(x, y, k);
                image.set(x, y, k, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(ForegroundPiece { image, mask: piece.mask.clone(), origin: piece.origin })
}

pub fn apply_relight(piece: &ForegroundPiece, params: &RelightParams) -> Result<ForegroundPiece> {
    let (w, h) = piece.size();
    apply_lightmap(piece, &lightmap(w, h, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    pub strokes: Vec<Stroke>,
}

fn stroke_overlap(stroke: &Mask, object: &Mask) -> f64 {
    let area = stroke.area();
    if area == 0 {
        return 0.0;
    }
    let inside = stroke.data().iter().zip(object.data()).filter(|(s, o)| **s && **o).count();
    inside as f64 / area as f64
}

/// Draws 1 to 4 polylines seeded inside the object, each covering the
/// object with at least [`MIN_STROKE_OVERLAP`] of its area.
pub fn sample_occlusion(piece: &ForegroundPiece, rng: &mut (impl Rng + ?Sized)) -> Result<OcclusionParams> {
    let (w, h) = piece.size();
    let inside = piece.mask.points();
    if inside.is_empty() {
        return Err(invalid("foreground mask is empty"));
    }
    let n = rng.random_range(1..=4);
    let min_side = w.min(h) as f64;
    let mut strokes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut chosen = None;
        for _ in 0..50 {
            let start = inside[rng.random_range(0..inside.len())];
            let radius = rng.random_range((0.02 * min_side).max(1.0)..=(0.06 * min_side).max(1.5));
            let k = rng.random_range(2..=5);
            let mut pts = vec![[start.0 as f64, start.1 as f64]];
            for _ in 1..k {
                let last = *pts.last().unwrap();
                let ang = rng.random_range(0.0..std::f64::consts::TAU);
                let len = rng.random_range(0.05..0.3) * min_side.max(4.0);
                pts.push([
                    (last[0] + len * ang.cos()).clamp(0.0, (w - 1) as f64),
                    (last[1] + len * ang.sin()).clamp(0.0, (h - 1) as f64),
                ]);
            }
            let stroke = Stroke { points: pts, radius };
            let m = stroke.rasterize(w, h)?;
            if stroke_overlap(&m, &piece.mask) >= MIN_STROKE_OVERLAP {
                chosen = Some(stroke);
                break;
            }
        }
        let stroke = chosen.unwrap_or_else(|| {
            let p = inside[rng.random_range(0..inside.len())];
            Stroke { points: vec![[p.0 as f64, p.1 as f64]], radius: 0.5 }
        });
        strokes.push(stroke);
    }
    Ok(OcclusionParams { strokes })
}

/// Paints the strokes white; returns the occluded piece and the stroke union.
pub fn apply_occlusion(piece: &ForegroundPiece, params: &OcclusionParams) -> Result<(ForegroundPiece, Mask)> {
    let (w, h) = piece.size();
    let mut union = Mask::new(w, h);
    for s in &params.strokes {
        union.union_in_place(&rasterize_stroke(&s.points, s.radius, w, h)?)?;
    }
    let mut image = piece.image.clone();
    for y in 0..h {
        for x in 0..w {
            if union.get(x, y) {
                image.pixel_mut(x, y).iter_mut().for_each(|v| *v = 1.0);
            }
        }
    }
    Ok((ForegroundPiece { image, mask: piece.mask.clone(), origin: piece.origin }, union))
}

/// Parameters of every augmentation applied to one piece, in application order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perspective: Option<PerspectiveParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relight: Option<RelightParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<ResolutionParams>,
}

impl AugmentRecord {
    pub fn is_empty(&self) -> bool {
        self.perspective.is_none() && self.resolution.is_none() && self.relight.is_none()
    }

    /// Samples each augmentation independently with probability `p`.
    pub fn sample(piece: &ForegroundPiece, p: f64, rng: &mut (impl Rng + ?Sized)) -> Result<Self> {
        let (w, h) = piece.size();
        let mut rec = AugmentRecord::default();
        if rng.random_bool(p) && w >= 2 && h >= 2 {
            rec.perspective = Some(sample_perspective(w, h, rng)?);
        }
        if rng.random_bool(p) {
            rec.relight = Some(sample_relight(rng));
        }
        if rng.random_bool(p) && (w.min(h) as f64) * SCALE_RANGE.0 >= 1.0 {
            rec.resolution = Some(sample_resolution(rng));
        }
        Ok(rec)
    }

    pub fn apply(&self, piece: &ForegroundPiece) -> Result<ForegroundPiece> {
        let mut out = piece.clone();
        if let Some(p) = &self.perspective {
            out = apply_perspective(&out, p)?;
        }
        if let Some(l) = &self.relight {
            out = apply_relight(&out, l)?;
        }
        if let Some(r) = &self.resolution {
            out = apply_resolution(&out, r)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn piece(w: usize, h: usize) -> ForegroundPiece {
        let image = Raster::from_fn(w, h, 3, |x, y, c| ((x * 13 + y * 7 + c * 5) % 17) as f64 / 16.0);
        let mask = Mask::rect(w, h, w / 4, h / 4, 3 * w / 4, 3 * h / 4);
        ForegroundPiece::new(image, mask, (0, 0)).unwrap()
    }

    #[test]
    fn zero_rho_keeps_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = sample_perspective_with_rho(30, 20, 0.0, &mut rng);
        let (src, dst) = p.quads(30, 20);
        assert_eq!(src, dst);
    }

    #[test]
    fn homography_identity_and_translation() {
        let src = PerspectiveParams::corners(40, 30);
        let h = solve_homography(&src, &src).unwrap();
        for (a, b) in h.m.iter().flatten().zip(Homography::IDENTITY.m.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        let dst = src.map(|p| [p[0] + 5.0, p[1]]);
        let t = solve_homography(&src, &dst).unwrap();
        for (a, b) in t.m.iter().flatten().zip(Homography::translation(5.0, 0.0).m.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_quad_is_degenerate() {
        let src = PerspectiveParams::corners(10, 10);
        let dst = [[0.0, 0.0], [5.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        assert!(matches!(solve_homography(&src, &dst), Err(Error::DegenerateQuad)));
    }

    #[test]
    fn identity_warp_is_exact() {
        let p = piece(24, 18);
        let out = warp(&p, &Homography::IDENTITY).unwrap();
        assert_eq!(out.mask, p.mask);
        assert!(out.image.max_abs_diff(&p.image).unwrap() <= 1.0 / 255.0);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let src = PerspectiveParams::corners(50, 40);
        let dst = [[3.0, 2.0], [47.0, 6.0], [45.0, 38.0], [1.0, 35.0]];
        let h = solve_homography(&src, &dst).unwrap();
        let inv = h.inverse().unwrap();
        for p in &src {
            let (x, y) = h.apply(p[0], p[1]);
            let (bx, by) = inv.apply(x, y);
            assert!((bx - p[0]).abs() < 1e-9 && (by - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_scale_is_identity() {
        let p = piece(20, 20);
        let out = apply_resolution(&p, &ResolutionParams { scale: 1.0 }).unwrap();
        assert!(out.image.max_abs_diff(&p.image).unwrap() <= 1.0 / 255.0);
        assert!(apply_resolution(&piece(5, 20), &ResolutionParams { scale: 0.5 }).is_err());
    }

    #[test]
    fn neutral_lightmap_is_identity() {
        let p = piece(16, 16);
        let out = apply_relight(&p, &RelightParams::neutral()).unwrap();
        assert_eq!(out.image, p.image);
    }

    #[test]
    fn lightmap_respects_range_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let params = sample_relight(&mut rng);
            let map = lightmap(12, 9, &params);
            let limit = match params.category {
                RelightCategory::Grayscale => 0.0,
                RelightCategory::LowSaturation => LOW_SATURATION_MAX,
                RelightCategory::HighSaturation => HIGH_SATURATION_MAX,
            };
            for y in 0..9 {
                for x in 0..12 {
                    let px = map.pixel(x, y);
                    assert!(px.iter().all(|v| (0.4..=1.6).contains(v)));
                    let mx = px.iter().cloned().fold(f64::MIN, f64::max);
                    let mn = px.iter().cloned().fold(f64::MAX, f64::min);
                    assert!((mx - mn) / mx <= limit + 1e-12);
                    if params.category == RelightCategory::Grayscale {
                        assert!(px[0] == px[1] && px[1] == px[2]);
                    }
                }
            }
        }
    }

    #[test]
    fn hsv_tint_primaries() {
        assert_eq!(hsv_tint(0.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_tint(120.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_tint(240.0, 0.0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_occlusion_is_identity() {
        let p = piece(16, 16);
        let (out, m) = apply_occlusion(&p, &OcclusionParams { strokes: vec![] }).unwrap();
        assert_eq!(out, p);
        assert!(m.is_empty());
    }

    #[test]
    fn extract_and_composite_round_trip() {
        let src = Raster::from_fn(20, 15, 3, |x, y, c| ((x + 2 * y + c) % 9) as f64 / 8.0);
        let mask = Mask::rect(20, 15, 3, 4, 11, 9);
        let p = ForegroundPiece::extract(&src, &mask).unwrap();
        assert_eq!(p.origin, (3, 4));
        assert_eq!(p.size(), (8, 5));
        let mut canvas = Raster::new(20, 15, 3);
        let fp = p.composite_into(&mut canvas);
        assert_eq!(fp, mask);
        for (x, y) in mask.points() {
            assert_eq!(canvas.pixel(x as usize, y as usize), src.pixel(x as usize, y as usize));
        }
    }

    #[test]
    fn record_serde_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = piece(32, 32);
        let rec = AugmentRecord::sample(&p, 1.0, &mut rng).unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        let back: AugmentRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.apply(&p).unwrap(), rec.apply(&p).unwrap());
    }
}
