//! Change-mask derivation for spatial layers and removal-pair synthesis.
//!
//! Source/edited pairs are compared in CIELAB; pixels whose ΔE exceeds a
//! threshold are wrapped in a convex hull, the filled hull is smoothed with a
//! rolling disc (closing then opening), and the result is accepted only if
//! its area ratio falls inside a fixed window.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster::{Mask, Raster};

pub const DEFAULT_THRESHOLD: f64 = 6.0;
pub const PRESCREEN_THRESHOLDS: [f64; 3] = [3.0, 6.0, 12.0];
pub const RATIO_MIN: f64 = 0.001;
pub const RATIO_MAX: f64 = 0.75;
pub const REMOVAL_DILATION: usize = 4;

const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];
const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// sRGB (components in `[0, 1]`) to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|i| {
        RGB_TO_XYZ[i][0] * lin[0] + RGB_TO_XYZ[i][1] * lin[1] + RGB_TO_XYZ[i][2] * lin[2]
    });
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`srgb_to_lab`].
pub fn lab_to_srgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [lab_f_inv(fx) * WHITE[0], lab_f_inv(fy) * WHITE[1], lab_f_inv(fz) * WHITE[2]];
    let lin = solve3(RGB_TO_XYZ, xyz);
    lin.map(linear_to_srgb)
}

fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    std::array::from_fn(|col| {
        let mut mc = m;
        for row in 0..3 {
            mc[row][col] = b[row];
        }
        det(mc) / d
    })
}

/// Per-pixel ΔE (Euclidean distance in Lab). Returns a one-channel raster.
pub fn lab_distance_map(src: &Raster, edited: &Raster) -> Result<Raster> {
    src.ensure_same_shape(edited)?;
    let (a, b) = (src.to_rgb(), edited.to_rgb());
    let (w, h) = src.size();
    Ok(Raster::from_fn(w, h, 1, |x, y, _| {
        let p = a.pixel(x, y);
        let q = b.pixel(x, y);
        let la = srgb_to_lab([p[0], p[1], p[2]]);
        let lb = srgb_to_lab([q[0], q[1], q[2]]);
        ((la[0] - lb[0]).powi(2) + (la[1] - lb[1]).powi(2) + (la[2] - lb[2]).powi(2)).sqrt()
    }))
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain. Vertices are counter-clockwise (in a y-up frame)
/// starting from the lexicographically smallest point; collinear points are
/// dropped. Degenerate inputs give one or two vertices.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Rasterizes a hull polygon (as returned by [`convex_hull`]) into a filled mask.
pub fn fill_polygon(hull: &[(i64, i64)], width: usize, height: usize) -> Mask {
    let mut m = Mask::new(width, height);
    if hull.is_empty() {
        return m;
    }
    let x0 = hull.iter().map(|p| p.0).min().unwrap().max(0);
    let x1 = hull.iter().map(|p| p.0).max().unwrap().min(width as i64 - 1);
    let y0 = hull.iter().map(|p| p.1).min().unwrap().max(0);
    let y1 = hull.iter().map(|p| p.1).max().unwrap().min(height as i64 - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = (x, y);
            let inside = match hull.len() {
                1 => p == hull[0],
                2 => cross(hull[0], hull[1], p) == 0,
                n => (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0),
            };
            if inside {
                m.set(x as usize, y as usize, true);
            }
        }
    }
    m
}

/// Disc radius used by the rolling-circle smoother for an `h × w` image.
pub fn default_radius(width: usize, height: usize) -> usize {
    ((0.01 * width.min(height) as f64).round() as usize).max(4)
}

fn disc_half_widths(r: usize) -> Vec<(isize, usize)> {
    let r = r as isize;
    (-r..=r)
        .map(|dy| {
            let hw = (((r * r - dy * dy) as f64).sqrt()).floor() as usize;
            (dy, hw)
        })
        .collect()
}

fn row_prefix(m: &Mask) -> Vec<Vec<u32>> {
    let (w, h) = m.size();
    (0..h)
        .map(|y| {
            let mut p = vec![0u32; w + 1];
            for x in 0..w {
                p[x + 1] = p[x] + m.get(x, y) as u32;
            }
            p
        })
        .collect()
}

/// Dilation by a disc of radius `r`; outside the canvas counts as unset.
pub fn dilate(m: &Mask, r: usize) -> Mask {
    let (w, h) = m.size();
    let pre = row_prefix(m);
    let disc = disc_half_widths(r);
    Mask::from_fn(w, h, |x, y| {
        disc.iter().any(|&(dy, hw)| {
            let yy = y as isize + dy;
            if yy < 0 || yy >= h as isize {
                return false;
            }
            let lo = x.saturating_sub(hw);
            let hi = (x + hw + 1).min(w);
            let row = &pre[yy as usize];
            row[hi] > row[lo]
        })
    })
}

/// Erosion by a disc of radius `r`; outside the canvas counts as set.
pub fn erode(m: &Mask, r: usize) -> Mask {
    let (w, h) = m.size();
    let pre = row_prefix(m);
    let disc = disc_half_widths(r);
    Mask::from_fn(w, h, |x, y| {
        disc.iter().all(|&(dy, hw)| {
            let yy = y as isize + dy;
            if yy < 0 || yy >= h as isize {
                return true;
            }
            let lo = x.saturating_sub(hw);
            let hi = (x + hw + 1).min(w);
            let row = &pre[yy as usize];
            (row[hi] - row[lo]) as usize == hi - lo
        })
    })
}

/// Closing followed by opening with a disc of radius `r`.
pub fn rolling_circle(m: &Mask, r: usize) -> Mask {
    let closed = erode(&dilate(m, r), r);
    dilate(&erode(&closed, r), r)
}

/// 8-connected components of a mask, each as a list of pixel coordinates.
pub fn components(m: &Mask) -> Vec<Vec<(i64, i64)>> {
    let (w, h) = m.size();
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || !m.data()[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            comp.push((x, y));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if !seen[j] && m.data()[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HullMode {
    #[default]
    Global,
    PerComponent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskParams {
    pub threshold: f64,
    /// Smoothing radius; `None` picks [`default_radius`].
    pub radius: Option<usize>,
    pub hull: HullMode,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, radius: None, hull: HullMode::Global }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMask {
    pub mask: Mask,
    /// The filled hull before smoothing.
    pub hull_mask: Mask,
    pub hull_area_ratio: f64,
    pub threshold: f64,
    pub radius: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    NoChange,
    TooSmall,
    TooLarge,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RejectReason::NoChange => "no-change",
            RejectReason::TooSmall => "too-small",
            RejectReason::TooLarge => "too-large",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskOutcome {
    Accepted(ChangeMask),
    Rejected { reason: RejectReason, ratio: f64, threshold: f64 },
}

impl MaskOutcome {
    pub fn is_accepted(&self) -> bool {
        matches!(self, MaskOutcome::Accepted(_))
    }

    pub fn ratio(&self) -> f64 {
        match self {
            MaskOutcome::Accepted(c) => c.hull_area_ratio,
            MaskOutcome::Rejected { ratio, .. } => *ratio,
        }
    }

    pub fn reason(&self) -> Option<RejectReason> {
        match self {
            MaskOutcome::Accepted(_) => None,
            MaskOutcome::Rejected { reason, .. } => Some(*reason),
        }
    }

    pub fn accepted(self) -> Option<ChangeMask> {
        match self {
            MaskOutcome::Accepted(c) => Some(c),
            MaskOutcome::Rejected { .. } => None,
        }
    }
}

/// Pixels whose ΔE is strictly above `threshold`.
pub fn suprathreshold(delta: &Raster, threshold: f64) -> Mask {
    Mask::from_raster(delta, threshold)
}

fn hull_mask(changed: &Mask, mode: HullMode) -> Mask {
    let (w, h) = changed.size();
    match mode {
        HullMode::Global => fill_polygon(&convex_hull(&changed.points()), w, h),
        HullMode::PerComponent => {
            let mut out = Mask::new(w, h);
            for comp in components(changed) {
                let filled = fill_polygon(&convex_hull(&comp), w, h);
                out.union_in_place(&filled).expect("same size");
            }
            out
        }
    }
}

pub fn classify_ratio(ratio: f64) -> Option<RejectReason> {
    if ratio < RATIO_MIN {
        Some(RejectReason::TooSmall)
    } else if ratio > RATIO_MAX {
        Some(RejectReason::TooLarge)
    } else {
        None
    }
}

/// Derives the spatial mask from a precomputed ΔE map.
pub fn derive_mask_from_delta(delta: &Raster, params: &MaskParams) -> MaskOutcome {
    let (w, h) = delta.size();
    let changed = suprathreshold(delta, params.threshold);
    if changed.is_empty() {
        return MaskOutcome::Rejected { reason: RejectReason::NoChange, ratio: 0.0, threshold: params.threshold };
    }
    let hull = hull_mask(&changed, params.hull);
    let radius = params.radius.unwrap_or_else(|| default_radius(w, h));
    let mask = rolling_circle(&hull, radius);
    let ratio = mask.area() as f64 / (w * h) as f64;
    match classify_ratio(ratio) {
        Some(reason) => MaskOutcome::Rejected { reason, ratio, threshold: params.threshold },
        None => MaskOutcome::Accepted(ChangeMask { mask, hull_mask: hull, hull_area_ratio: ratio, threshold: params.threshold, radius }),
    }
}

pub fn derive_mask(src: &Raster, edited: &Raster, params: &MaskParams) -> Result<MaskOutcome> {
    if !params.threshold.is_finite() || params.threshold < 0.0 {
        return Err(invalid(format!("threshold must be a non-negative number, got {}", params.threshold)));
    }
    let delta = lab_distance_map(src, edited)?;
    Ok(derive_mask_from_delta(&delta, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prescreen {
    pub outcomes: Vec<(f64, MaskOutcome)>,
}

impl Prescreen {
    /// A pair is rejected only if every threshold fails.
    pub fn passes(&self) -> bool {
        self.outcomes.iter().any(|(_, o)| o.is_accepted())
    }
}

/// Evaluates the pair at each of [`PRESCREEN_THRESHOLDS`].
pub fn prescreen(src: &Raster, edited: &Raster, radius: Option<usize>, hull: HullMode) -> Result<Prescreen> {
    let delta = lab_distance_map(src, edited)?;
    let outcomes = PRESCREEN_THRESHOLDS
        .iter()
        .map(|&threshold| (threshold, derive_mask_from_delta(&delta, &MaskParams { threshold, radius, hull })))
        .collect();
    Ok(Prescreen { outcomes })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RemovalPair {
    pub input: Raster,
    pub target: Raster,
    pub mask: Mask,
    pub footprint: Mask,
    /// Top-left of the pasted foreground bounding box.
    pub offset: (usize, usize),
}

/// Pastes the masked foreground so that its bounding box starts at `(nx, ny)`.
pub fn paste_foreground(image: &Raster, fg_mask: &Mask, nx: usize, ny: usize) -> Result<RemovalPair> {
    let (w, h) = image.size();
    if fg_mask.size() != (w, h) {
        return Err(crate::error::shape_mismatch((w, h), fg_mask.size()));
    }
    let (x0, y0, x1, y1) = fg_mask.bbox().ok_or_else(|| invalid("foreground mask is empty"))?;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    if nx + bw > w || ny + bh > h {
        return Err(invalid(format!("paste at ({nx}, {ny}) with size {bw}x{bh} leaves the {w}x{h} canvas")));
    }
    let mut input = image.clone();
    let mut footprint = Mask::new(w, h);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if fg_mask.get(x, y) {
                let (tx, ty) = (x - x0 + nx, y - y0 + ny);
                let src = image.pixel(x, y).to_vec();
                input.pixel_mut(tx, ty).copy_from_slice(&src);
                footprint.set(tx, ty, true);
            }
        }
    }
    let mask = dilate(&footprint, REMOVAL_DILATION);
    Ok(RemovalPair { input, target: image.clone(), mask, footprint, offset: (nx, ny) })
}

/// Copies the foreground to a uniformly random in-bounds location; the
/// original image is the target.
pub fn synthesize_removal_pair(image: &Raster, fg_mask: &Mask, rng: &mut impl Rng) -> Result<RemovalPair> {
    let (w, h) = image.size();
    let (x0, y0, x1, y1) = fg_mask.bbox().ok_or_else(|| invalid("foreground mask is empty"))?;
    let (bw, bh) = (x1 - x0 + 1, y1 - y0 + 1);
    if bw > w || bh > h || fg_mask.size() != (w, h) {
        return Err(invalid("foreground does not fit in the canvas"));
    }
    let nx = rng.random_range(0..=w - bw);
    let ny = rng.random_range(0..=h - bh);
    paste_foreground(image, fg_mask, nx, ny)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lab_reference_points() {
        let white = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-3 && white[1].abs() < 0.01 && white[2].abs() < 0.01);
        let black = srgb_to_lab([0.0, 0.0, 0.0]);
        assert!(black.iter().all(|v| v.abs() < 1e-12));
        // golden value from an independent scalar evaluation of the same formulas
        let gray = srgb_to_lab([0.5, 0.5, 0.5]);
        assert!((gray[0] - 53.38896705407973).abs() < 1e-9);
        assert!(gray[1].abs() < 1e-4 && gray[2].abs() < 1e-4);
    }

    #[test]
    fn lab_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            let back = lab_to_srgb(srgb_to_lab(c));
            for i in 0..3 {
                assert!((back[i] - c[i]).abs() < 1e-6, "{c:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn black_vs_white_is_100() {
        let a = Raster::filled(4, 3, 3, 0.0);
        let b = Raster::filled(4, 3, 3, 1.0);
        let d = lab_distance_map(&a, &b).unwrap();
        assert!(d.data().iter().all(|v| (v - 100.0).abs() < 1e-3));
    }

    #[test]
    fn hull_simple_cases() {
        let tri = convex_hull(&[(0, 0), (4, 0), (0, 3)]);
        assert_eq!(tri.len(), 3);
        let sq = convex_hull(&[(0, 0), (10, 0), (10, 10), (0, 10), (5, 5), (3, 7), (5, 0)]);
        assert_eq!(sq, vec![(0, 0), (10, 0), (10, 10), (0, 10)]);
        assert_eq!(convex_hull(&[(2, 2), (2, 2)]), vec![(2, 2)]);
        assert_eq!(convex_hull(&[(0, 0), (1, 1), (2, 2)]).len(), 2);
    }

    #[test]
    fn closing_is_extensive_opening_is_not() {
        let m = Mask::rect(40, 40, 10, 10, 30, 30);
        let c = erode(&dilate(&m, 4), 4);
        assert!(m.is_subset_of(&c));
        let o = dilate(&erode(&m, 4), 4);
        assert!(o.is_subset_of(&m));
        assert!(!m.get(10, 10) || !o.get(10, 10));
    }

    #[test]
    fn identical_pair_rejected() {
        let a = Raster::filled(32, 32, 3, 0.3);
        let out = derive_mask(&a, &a, &MaskParams::default()).unwrap();
        assert_eq!(out.reason(), Some(RejectReason::NoChange));
    }

    #[test]
    fn mostly_changed_is_too_large() {
        let a = Raster::filled(100, 100, 3, 0.2);
        let mut b = a.clone();
        for y in 0..95 {
            for x in 0..95 {
                b.pixel_mut(x, y).copy_from_slice(&[0.9, 0.1, 0.1]);
            }
        }
        let out = derive_mask(&a, &b, &MaskParams::default()).unwrap();
        assert_eq!(out.reason(), Some(RejectReason::TooLarge));
    }

    #[test]
    fn per_component_is_subset_of_global() {
        let mut changed = Mask::rect(60, 60, 5, 5, 15, 15);
        changed.union_in_place(&Mask::rect(60, 60, 40, 40, 50, 55)).unwrap();
        let g = hull_mask(&changed, HullMode::Global);
        let p = hull_mask(&changed, HullMode::PerComponent);
        assert!(p.is_subset_of(&g));
        assert!(p.area() < g.area());
        assert_eq!(components(&changed).len(), 2);
    }

    #[test]
    fn forced_offset_is_identity() {
        let img = Raster::from_fn(20, 20, 3, |x, y, c| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
        let fg = Mask::rect(20, 20, 4, 6, 9, 10);
        let pair = paste_foreground(&img, &fg, 4, 6).unwrap();
        assert_eq!(pair.input, pair.target);
        assert!(fg.is_subset_of(&pair.mask));
    }

    #[test]
    fn oversized_foreground_rejected() {
        let img = Raster::new(10, 10, 3);
        let fg = Mask::new(10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize_removal_pair(&img, &fg, &mut rng).is_err());
        assert!(paste_foreground(&img, &Mask::rect(10, 10, 0, 0, 4, 4), 7, 0).is_err());
    }
}
