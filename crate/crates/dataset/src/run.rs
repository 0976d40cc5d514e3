//! Directory-level builds: discover inputs, build samples on a worker pool,
//! and append records through one writer.

use std::path::{Path, PathBuf};

use layered_core::{Exec, Mask, Raster};

use crate::build::{
    build_color_sample, build_content_sample, build_removal_sample, build_spatial_sample, build_structural_sample,
    registry, Rejection, Sample, SampleMeta,
};
use crate::config::DatasetConfig;
use crate::error::{DatasetError, Result};
use crate::manifest::{write_files, ManifestWriter, MANIFEST_NAME};
use crate::record::Pipeline;

const MASK_SUFFIX: &str = "_mask";
const EDITED_SUFFIX: &str = "_edited";

#[derive(Clone, Debug, PartialEq)]
pub struct BuildRequest {
    pub pipeline: Pipeline,
    pub input_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildSummary {
    pub pipeline: Pipeline,
    pub manifest: PathBuf,
    pub attempted: usize,
    pub produced: usize,
    pub rejections: Vec<Rejection>,
}

impl BuildSummary {
    pub fn success_ratio(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.produced as f64 / self.attempted as f64
        }
    }

    pub fn succeeded(&self, min_ratio: f64) -> bool {
        self.attempted > 0 && self.success_ratio() >= min_ratio
    }
}

/// Stems of `<stem>.png` files that are not masks or edited variants,
/// sorted so builds are order-stable.
pub fn discover_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            let is_png = p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png"));
            let stem = p.file_stem()?.to_str()?.to_string();
            (is_png && !stem.ends_with(MASK_SUFFIX) && !stem.ends_with(EDITED_SUFFIX)).then_some(stem)
        })
        .collect();
    stems.sort();
    Ok(stems)
}

fn caption(dir: &Path, stem: &str) -> String {
    std::fs::read_to_string(dir.join(format!("{stem}.txt"))).map(|s| s.trim().to_string()).unwrap_or_default()
}

fn image(dir: &Path, stem: &str, suffix: &str) -> Result<Raster> {
    Ok(Raster::load(dir.join(format!("{stem}{suffix}.png")))?)
}

fn mask(dir: &Path, stem: &str) -> Result<Mask> {
    Ok(Mask::load(dir.join(format!("{stem}{MASK_SUFFIX}.png")))?)
}

type Outcome = std::result::Result<Sample, Rejection>;

fn one(req: &BuildRequest, cfg: &DatasetConfig, reg: &layered_core::edges::ExtractorRegistry, stem: &str, index: u64) -> Result<Outcome> {
    let dir = req.input_dir.as_path();
    let meta = SampleMeta::new(req.pipeline, stem, req.seed, index);
    let mut rng = meta.rng();
    let cap = caption(dir, stem);
    let sample = match req.pipeline {
        Pipeline::Content => build_content_sample(&meta, &image(dir, stem, "")?, &mask(dir, stem)?, &cap, cfg, &mut rng)?,
        Pipeline::Structural => build_structural_sample(&meta, &image(dir, stem, "")?, &cap, cfg, reg, &mut rng)?,
        Pipeline::Color => build_color_sample(&meta, &image(dir, stem, "")?, &cap, cfg)?,
        Pipeline::Spatial => {
            return build_spatial_sample(&meta, &image(dir, stem, "")?, &image(dir, stem, EDITED_SUFFIX)?, &cap, cfg)
        }
        Pipeline::Removal => build_removal_sample(&meta, &image(dir, stem, "")?, &mask(dir, stem)?, &cap, &mut rng)?,
    };
    Ok(Ok(sample))
}

fn run_on_pool<R: Send>(workers: usize, n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Result<Vec<R>> {
    #[cfg(feature = "parallel")]
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| DatasetError::Config(format!("worker pool: {e}")))?;
        return Ok(pool.install(|| Exec::Parallel.map_range(n, f)));
    }
    let _ = workers;
    Ok(Exec::Sequential.map_range(n, f))
}

/// Builds one pipeline over a directory. Each worker writes its own image
/// files; records are appended by this thread in input order.
pub fn run_build(req: &BuildRequest, cfg: &DatasetConfig) -> Result<BuildSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&req.out_dir)?;
    let stems = discover_stems(&req.input_dir)?;
    let reg = registry(cfg);

    // Removal draws `n` records round-robin over the usable inputs.
    let (jobs, mut rejections): (Vec<(String, u64)>, Vec<Rejection>) = if req.pipeline == Pipeline::Removal {
        let (usable, missing): (Vec<&String>, Vec<&String>) =
            stems.iter().partition(|s| req.input_dir.join(format!("{s}{MASK_SUFFIX}.png")).is_file());
        if usable.is_empty() {
            return Err(DatasetError::Insufficient(format!("no image/mask pairs in {}", req.input_dir.display())));
        }
        let n = cfg.removal_count.unwrap_or(usable.len());
        let jobs = (0..n).map(|k| (usable[k % usable.len()].clone(), k as u64)).collect();
        let rej = missing.into_iter().map(|s| Rejection { id: s.clone(), reason: "no foreground mask".into() }).collect();
        (jobs, rej)
    } else {
        (stems.iter().enumerate().map(|(i, s)| (s.clone(), i as u64)).collect(), Vec::new())
    };

    let results = run_on_pool(req.workers, jobs.len(), |i| -> std::result::Result<Sample, Rejection> {
        let (stem, index) = &jobs[i];
        let id = SampleMeta::new(req.pipeline, stem, req.seed, *index).id;
        let outcome = one(req, cfg, &reg, stem, *index).unwrap_or_else(|e| Err(Rejection { id: id.clone(), reason: e.to_string() }));
        let sample = outcome?;
        write_files(&req.out_dir, &sample).map_err(|e| Rejection { id, reason: e.to_string() })?;
        Ok(sample)
    })?;

    let manifest = req.out_dir.join(MANIFEST_NAME);
    let mut writer = ManifestWriter::create(&manifest)?;
    let attempted = results.len() + rejections.len();
    for r in results {
        match r {
            Ok(sample) => writer.append(&sample.record)?,
            Err(rej) => rejections.push(rej),
        }
    }
    let produced = writer.finish()?;
    Ok(BuildSummary { pipeline: req.pipeline, manifest, attempted, produced, rejections })
}
