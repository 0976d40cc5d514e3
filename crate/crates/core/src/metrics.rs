//! Pixel-space image metrics: L1, L2 (MSE), PSNR and SSIM.
//!
//! Inputs are `[0, 1]` rasters; PSNR uses a peak of 1.0 and reports `+∞`
//! for identical images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::raster::Raster;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute difference over all pixels and channels.
pub fn l1(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(running_mean(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())))
}

/// Mean squared difference over all pixels and channels.
pub fn l2(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(running_mean(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y))))
}

/// Incremental mean; a constant sequence yields that constant exactly.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, v) in values.enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

/// `10·log10(1 / MSE)`; `f64::INFINITY` when the images are identical.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    let mse = l2(a, b)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM of the grayscale versions of `a` and `b` (11×11 Gaussian
/// window, σ = 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1, valid region).
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (w, h) = a.size();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::TooSmall(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let ga = a.to_gray();
    let gb = b.to_gray();
    let (pa, pb) = (ga.data(), gb.data());
    let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
    let k = gaussian_window();
    let (mu_a, _, _) = filter_valid(pa, w, h, &k);
    let (mu_b, _, _) = filter_valid(pb, w, h, &k);
    let (e_aa, _, _) = filter_valid(&aa, w, h, &k);
    let (e_bb, _, _) = filter_valid(&bb, w, h, &k);
    let (e_ab, _, _) = filter_valid(&ab, w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / n as f64)
}

/// Mean metrics over a set of image pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l1: f64,
    pub l2: f64,
    /// Mean PSNR in dB; `+∞` (serialized as `"inf"`) if any pair is identical.
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMetrics {
    pub l1: f64,
    pub l2: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn pair_metrics(pred: &Raster, reference: &Raster) -> Result<PairMetrics> {
    let mse = l2(pred, reference)?;
    Ok(PairMetrics {
        l1: l1(pred, reference)?,
        l2: mse,
        psnr: psnr_from_mse(mse),
        ssim: ssim(pred, reference)?,
    })
}

/// Per-pair metrics computed under `exec`, then averaged.
pub fn evaluate(pairs: &[(Raster, Raster)], exec: Exec) -> Result<MetricReport> {
    let per: Vec<PairMetrics> = exec
        .map(pairs, |(p, r)| pair_metrics(p, r))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(MetricReport::from_pairs(&per))
}

impl MetricReport {
    pub fn from_pairs(per: &[PairMetrics]) -> Self {
        let n = per.len().max(1) as f64;
        let mean = |f: fn(&PairMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
        Self {
            l1: mean(|m| m.l1),
            l2: mean(|m| m.l2),
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            count: per.len(),
        }
    }
}

mod inf_as_string {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrStr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match NumOrStr::deserialize(d)? {
            NumOrStr::Num(v) => Ok(v),
            NumOrStr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            NumOrStr::Str(s) => Err(D::Error::custom(format!("expected number or \"inf\", got {s}"))),
        }
    }
}
