//! Floating-point rasters and binary masks.
//!
//! Pixel values live in `[0, 1]` as `f64`, interleaved by channel. PNG is the
//! only interchange format: 8-bit, grayscale for single-channel rasters and
//! masks, RGB or RGBA otherwise.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage, Rgba, RgbaImage};

use crate::error::{invalid, shape_mismatch, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(shape_mismatch(width * height * channels, data.len()));
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds a raster by evaluating `f(x, y, c)` for every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    /// A solid RGB raster.
    pub fn solid_rgb(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(width, height, 3, |_, _, c| rgb[c])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(width, height)`.
    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y, 0);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_mismatch(
                (self.width, self.height, self.channels),
                (other.width, other.height, other.channels),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Raster {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Luma with Rec. 601 weights. Single-channel input is returned as-is;
    /// an alpha channel, if any, is ignored.
    pub fn to_gray(&self) -> Raster {
        match self.channels {
            1 => self.clone(),
            2 => self.channel(0),
            _ => Raster::from_fn(self.width, self.height, 1, |x, y, _| {
                let p = self.pixel(x, y);
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            }),
        }
    }

    /// Expands a gray raster to RGB, drops alpha from RGBA.
    pub fn to_rgb(&self) -> Raster {
        match self.channels {
            3 => self.clone(),
            1 | 2 => Raster::from_fn(self.width, self.height, 3, |x, y, _| self.get(x, y, 0)),
            _ => Raster::from_fn(self.width, self.height, 3, |x, y, c| self.get(x, y, c)),
        }
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, c: usize) -> Raster {
        Raster::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// Bilinear sample at continuous index coordinates (pixel centers at
    /// integers), clamping to the edge.
    pub fn sample_bilinear_clamped(&self, fx: f64, fy: f64, c: usize) -> f64 {
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
        let bottom = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Bilinear sample treating everything outside the raster as zero.
    /// Returns `false` when the point is more than half a pixel outside.
    pub fn sample_bilinear_zero(&self, fx: f64, fy: f64, out: &mut [f64]) -> bool {
        let (w, h) = (self.width as f64, self.height as f64);
        if fx < -0.5 || fy < -0.5 || fx > w - 0.5 || fy > h - 0.5 {
            return false;
        }
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = self.sample_bilinear_clamped(fx, fy, c);
        }
        true
    }

    /// Bilinear resize with half-pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Raster {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Raster::from_fn(width, height, self.channels, |x, y, c| {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let fy = (y as f64 + 0.5) * sy - 0.5;
            self.sample_bilinear_clamped(fx, fy, c)
        })
    }

    /// Area-average resize: each output pixel is the exact overlap-weighted
    /// mean of the input pixels it covers. Works for any ratio.
    pub fn resize_area(&self, width: usize, height: usize) -> Raster {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let wx = overlap_weights(self.width, width);
        let wy = overlap_weights(self.height, height);
        let mut out = Raster::new(width, height, self.channels);
        let mut acc = vec![0.0; self.channels];
        for (oy, ys) in wy.iter().enumerate() {
            for (ox, xs) in wx.iter().enumerate() {
                acc.iter_mut().for_each(|a| *a = 0.0);
                let mut total = 0.0;
                for &(iy, wyv) in ys {
                    for &(ix, wxv) in xs {
                        let w = wyv * wxv;
                        total += w;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += w * self.get(ix, iy, c);
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out.set(ox, oy, c, a / total);
                }
            }
        }
        out
    }

    /// Crops `[x, x+w) × [y, y+h)`, which must lie inside the raster.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Raster> {
        if x + w > self.width || y + h > self.height {
            return Err(invalid(format!(
                "crop {w}x{h}+{x}+{y} exceeds raster {}x{}",
                self.width, self.height
            )));
        }
        Ok(Raster::from_fn(w, h, self.channels, |cx, cy, c| self.get(x + cx, y + cy, c)))
    }

    pub fn mean_abs_diff(&self, other: &Raster) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Raster) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Raster {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, bytes): (usize, Vec<u8>) = match img {
            DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) => (1, img.to_luma8().into_raw()),
            DynamicImage::ImageRgba8(_)
            | DynamicImage::ImageRgba16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgba32F(_) => (4, img.to_rgba8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        Raster {
            width: w,
            height: h,
            channels,
            data: bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
        }
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Raster> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Raster::from_dynamic(&img))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Raster> {
        let img = image::open(path)?;
        Ok(Raster::from_dynamic(&img))
    }

    /// 8-bit quantized samples (round-to-nearest, clamped).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        let raw = self.to_u8();
        match self.channels {
            1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("sized buffer")),
            3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("sized buffer")),
            4 => DynamicImage::ImageRgba8(RgbaImage::from_raw(w, h, raw).expect("sized buffer")),
            _ => self.to_rgb().to_dynamic(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_dynamic().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// For each output cell, the input cells it overlaps and the overlap length.
fn overlap_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(n_in);
            (first..last)
                .filter_map(|i| {
                    let w = (end.min((i + 1) as f64) - start.max(i as f64)).max(0.0);
                    (w > 0.0).then_some((i, w))
                })
                .collect()
        })
        .collect()
}

/// A binary raster.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![true; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Axis-aligned rectangle `[x0, x1) × [y0, y1)`.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-range coordinates read as `false`.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn ensure_same_size(&self, other: &Mask) -> Result<()> {
        if self.size() == other.size() {
            Ok(())
        } else {
            Err(shape_mismatch(self.size(), other.size()))
        }
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_size(other)?;
        Ok(self.zip_with(other, |a, b| a || b))
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_size(other)?;
        Ok(self.zip_with(other, |a, b| a && b))
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn union_in_place(&mut self, other: &Mask) -> Result<()> {
        self.ensure_same_size(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a |= b);
        Ok(())
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// True when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.size() == other.size() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn iou(&self, other: &Mask) -> Result<f64> {
        self.ensure_same_size(other)?;
        let inter = self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count();
        let uni = self.data.iter().zip(&other.data).filter(|(&a, &b)| a || b).count();
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    /// Mean `(x, y)` of set pixels, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Set-pixel coordinates in row-major order.
    pub fn points(&self) -> Vec<(i64, i64)> {
        let mut pts = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    pts.push((x as i64, y as i64));
                }
            }
        }
        pts
    }

    /// Pixels `> threshold` in channel 0 become set.
    pub fn from_raster(r: &Raster, threshold: f64) -> Mask {
        Mask::from_fn(r.width(), r.height(), |x, y| r.get(x, y, 0) > threshold)
    }

    pub fn to_raster(&self) -> Raster {
        Raster::from_fn(self.width, self.height, 1, |x, y, _| if self.get(x, y) { 1.0 } else { 0.0 })
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.iter().map(|&b| if b { 255 } else { 0 }).collect())
                .expect("sized buffer");
        let mut buf = Cursor::new(Vec::new());
        DynamicImage::ImageLuma8(img).write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    /// Decodes a PNG; any channel-0 (or luma) value ≥ 128 counts as set.
    /// For RGBA input, alpha is used when the color channels are uniform.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Mask> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Mask::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Mask {
        if img.color().has_alpha() {
            let rgba = img.to_rgba8();
            let opaque_everywhere = rgba.pixels().all(|Rgba(p)| p[3] == 255);
            if !opaque_everywhere {
                return Mask::from_fn(rgba.width() as usize, rgba.height() as usize, |x, y| {
                    rgba.get_pixel(x as u32, y as u32)[3] >= 128
                });
            }
        }
        let gray = img.to_luma8();
        Mask::from_fn(gray.width() as usize, gray.height() as usize, |x, y| {
            gray.get_pixel(x as u32, y as u32)[0] >= 128
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mask> {
        Ok(Mask::from_dynamic(&image::open(path)?))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Serde adapters that store rasters and masks as base64-encoded PNG strings.
pub mod png_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{Mask, Raster};

    pub fn encode_raster(r: &Raster) -> crate::Result<String> {
        Ok(STANDARD.encode(r.to_png_bytes()?))
    }

    pub fn decode_raster(s: &str) -> crate::Result<Raster> {
        let bytes = STANDARD
            .decode(s.trim())
            .map_err(|e| crate::error::invalid(format!("base64: {e}")))?;
        Raster::from_png_bytes(&bytes)
    }

    pub fn encode_mask(m: &Mask) -> crate::Result<String> {
        Ok(STANDARD.encode(m.to_png_bytes()?))
    }

    pub fn decode_mask(s: &str) -> crate::Result<Mask> {
        let bytes = STANDARD
            .decode(s.trim())
            .map_err(|e| crate::error::invalid(format!("base64: {e}")))?;
        Mask::from_png_bytes(&bytes)
    }

    pub mod raster {
        use super::*;

        pub fn serialize<S: Serializer>(r: &Raster, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(&encode_raster(r).map_err(serde::ser::Error::custom)?)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Raster, D::Error> {
            let s = String::deserialize(d)?;
            decode_raster(&s).map_err(D::Error::custom)
        }
    }

    pub mod raster_opt {
        use super::*;

        pub fn serialize<S: Serializer>(r: &Option<Raster>, s: S) -> Result<S::Ok, S::Error> {
            match r {
                Some(r) => s.serialize_some(&encode_raster(r).map_err(serde::ser::Error::custom)?),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Raster>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| decode_raster(&s).map_err(D::Error::custom))
                .transpose()
        }
    }

    pub mod mask_opt {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<Mask>, s: S) -> Result<S::Ok, S::Error> {
            match m {
                Some(m) => s.serialize_some(&encode_mask(m).map_err(serde::ser::Error::custom)?),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Mask>, D::Error> {
            Option::<String>::deserialize(d)?
                .map(|s| decode_mask(&s).map_err(D::Error::custom))
                .transpose()
        }
    }
}
