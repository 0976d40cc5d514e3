//! Structural maps: a self-contained Canny detector and a registry of edge
//! extractors (Canny plus any number of providers that read precomputed maps
//! from disk, e.g. the output of a learned line-art model).

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CannyParams {
    pub sigma: f64,
    /// Hysteresis thresholds as fractions of the maximum gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.4, low: 0.1, high: 0.3 }
    }
}

impl CannyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0 < self.low && self.low < self.high && self.high <= 1.0) {
            return Err(invalid(format!(
                "thresholds must satisfy 0 < low < high <= 1, got {} / {}",
                self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Canny edges as a single-channel `{0, 1}` raster.
///
/// Grayscale, Gaussian blur, Sobel gradients, non-maximum suppression along
/// the gradient direction quantized to four orientations, then double
/// threshold with 8-connected hysteresis.
pub fn canny(image: &Raster, params: &CannyParams) -> Result<Raster> {
    params.validate()?;
    let (w, h) = image.size();
    if w == 0 || h == 0 {
        return Err(invalid("canny needs a non-empty image"));
    }
    let gray = image.to_gray();
    let blurred = gaussian_blur(&gray, params.sigma);
    let (gx, gy) = sobel(&blurred);
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut out = Raster::new(w, h, 1);
    if max <= 1e-12 {
        return Ok(out);
    }
    let thin = non_maximum_suppression(&mag, &gx, &gy, w, h);
    let (low, high) = (params.low * max, params.high * max);
    for (i, on) in hysteresis(&thin, w, h, low, high).into_iter().enumerate() {
        if on {
            out.data_mut()[i] = 1.0;
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a single-channel raster, edge-replicating.
pub fn gaussian_blur(gray: &Raster, sigma: f64) -> Raster {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = gray.size();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let tmp = Raster::from_fn(w, h, 1, |x, y, _| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * gray.get(clamp(x as isize + i as isize - r, w), y, 0))
            .sum()
    });
    Raster::from_fn(w, h, 1, |x, y, _| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp.get(x, clamp(y as isize + i as isize - r, h), 0))
            .sum()
    })
}

fn sobel(img: &Raster) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = img.size();
    let at = |x: isize, y: isize| img.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize, 0);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Keeps a pixel only if it is a ridge of the magnitude along its gradient
/// direction. Plateaus of two equal pixels (a step edge falling exactly
/// between them) keep only the second, so edges stay one pixel wide.
fn non_maximum_suppression(mag: &[f64], gx: &[f64], gy: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let mut angle = gy[i].atan2(gx[i]).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            let (dx, dy): (isize, isize) = if !(22.5..157.5).contains(&angle) {
                (1, 0)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (0, 1)
            } else {
                (-1, 1)
            };
            let before = mag[((y as isize - dy) as usize) * w + (x as isize - dx) as usize];
            let after = mag[((y as isize + dy) as usize) * w + (x as isize + dx) as usize];
            if m >= before && m > after {
                out[i] = m;
            }
        }
    }
    out
}

fn hysteresis(thin: &[f64], w: usize, h: usize, low: f64, high: f64) -> Vec<bool> {
    let mut edge = vec![false; w * h];
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high && m > 0.0 {
            edge[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edge[j] && thin[j] >= low && thin[j] > 0.0 {
                    edge[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edge
}

/// Something that turns an image into a structural map.
pub trait EdgeExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// `key` identifies the image (its file stem) for providers that look
    /// up precomputed maps.
    fn extract(&self, image: &Raster, key: &str) -> Result<Raster>;
}

#[derive(Clone, Debug, Default)]
pub struct CannyExtractor {
    pub params: CannyParams,
}

impl EdgeExtractor for CannyExtractor {
    fn name(&self) -> &str {
        "canny"
    }

    fn extract(&self, image: &Raster, _key: &str) -> Result<Raster> {
        canny(image, &self.params)
    }
}

/// Reads `<dir>/<key>.png` as a single-channel map, unchanged.
#[derive(Clone, Debug)]
pub struct FileExtractor {
    pub name: String,
    pub dir: PathBuf,
}

impl EdgeExtractor for FileExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn extract(&self, _image: &Raster, key: &str) -> Result<Raster> {
        let path = self.dir.join(format!("{key}.png"));
        Ok(Raster::load(&path)?.to_gray())
    }
}

#[derive(Default)]
pub struct ExtractorRegistry {
    extractors: Vec<Box<dyn EdgeExtractor>>,
}

impl ExtractorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// A registry holding only the built-in Canny extractor.
    pub fn with_canny(params: CannyParams) -> Self {
        let mut r = Self::new();
        r.register(Box::new(CannyExtractor { params }));
        r
    }

    pub fn register(&mut self, e: Box<dyn EdgeExtractor>) -> &mut Self {
        self.extractors.push(e);
        self
    }

    pub fn len(&self) -> usize {
        self.extractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extractors.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.extractors.iter().map(|e| e.name()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&dyn EdgeExtractor> {
        self.extractors.iter().find(|e| e.name() == name).map(|e| e.as_ref())
    }

    /// Uniformly random extractor.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&dyn EdgeExtractor> {
        if self.extractors.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        Ok(self.extractors[rng.random_range(0..self.extractors.len())].as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Mask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square_image() -> Raster {
        Raster::from_fn(256, 256, 3, |x, y, _| {
            if (78..178).contains(&x) && (78..178).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn uniform_image_has_no_edges() {
        let e = canny(&Raster::filled(32, 32, 3, 0.6), &CannyParams::default()).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_gives_thin_ring() {
        let e = canny(&square_image(), &CannyParams::default()).unwrap();
        let count = e.data().iter().filter(|&&v| v == 1.0).count();
        assert!((360..=520).contains(&count), "edge count {count}");
        // every edge pixel within 2 px of the square boundary
        for y in 0..256i64 {
            for x in 0..256i64 {
                if e.get(x as usize, y as usize, 0) == 1.0 {
                    let dx = (x - 78).abs().min((x - 177).abs());
                    let dy = (y - 78).abs().min((y - 177).abs());
                    let inside_x = (76..=179).contains(&x);
                    let inside_y = (76..=179).contains(&y);
                    assert!((dx <= 2 && inside_y) || (dy <= 2 && inside_x), "stray edge at {x},{y}");
                }
            }
        }
        assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn raising_low_threshold_only_removes() {
        let img = Raster::from_fn(64, 64, 1, |x, y, _| ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos() * 0.5 + 0.5);
        let a = canny(&img, &CannyParams { low: 0.05, ..Default::default() }).unwrap();
        let b = canny(&img, &CannyParams { low: 0.2, ..Default::default() }).unwrap();
        let ma = Mask::from_raster(&a, 0.5);
        let mb = Mask::from_raster(&b, 0.5);
        assert!(mb.is_subset_of(&ma));
    }

    #[test]
    fn params_are_validated() {
        let img = Raster::filled(8, 8, 1, 0.0);
        assert!(canny(&img, &CannyParams { low: 0.5, high: 0.3, sigma: 1.0 }).is_err());
        assert!(canny(&img, &CannyParams { sigma: 0.0, ..Default::default() }).is_err());
    }

    #[test]
    fn registry_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(ExtractorRegistry::new().pick(&mut rng), Err(Error::EmptyRegistry)));
        let reg = ExtractorRegistry::with_canny(CannyParams::default());
        for _ in 0..10 {
            assert_eq!(reg.pick(&mut rng).unwrap().name(), "canny");
        }
    }
}
