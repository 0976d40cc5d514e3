//! Reading, writing, validating and replaying JSONL manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use layered_core::mask::paste_foreground;
use layered_core::{Mask, Raster};

use crate::build::{color_cue, render_content, replay_spatial_mask, replay_structural_cue, Sample};
use crate::config::DatasetConfig;
use crate::error::{DatasetError, Result};
use crate::record::{ManifestRecord, Params};

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes a sample's image files under `root`.
pub fn write_files(root: &Path, sample: &Sample) -> Result<()> {
    for (rel, bytes) in &sample.files {
        std::fs::write(root.join(rel), bytes)?;
    }
    Ok(())
}

/// The single appender for a manifest file.
pub struct ManifestWriter {
    out: BufWriter<File>,
    lines: usize,
}

impl ManifestWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { out: BufWriter::new(File::create(path)?), lines: 0 })
    }

    pub fn append(&mut self, record: &ManifestRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.lines += 1;
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.lines)
    }
}

/// Writes every sample's files and a fresh manifest at `root/manifest.jsonl`.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let path = root.join(MANIFEST_NAME);
    let mut w = ManifestWriter::create(&path)?;
    for s in samples {
        write_files(root, s)?;
        w.append(&s.record)?;
    }
    w.finish()?;
    Ok(path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

fn root_of(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub records: usize,
    pub missing_files: Vec<String>,
    pub schema_violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.missing_files.is_empty() && self.schema_violations.is_empty()
    }
}

/// Checks every line parses, carries the fields its pipeline needs, and
/// references files that exist relative to the manifest's directory.
pub fn validate_manifest(path: impl AsRef<Path>) -> Result<ValidationReport> {
    let path = path.as_ref();
    let root = root_of(path);
    let mut report = ValidationReport::default();
    let mut seen = std::collections::HashSet::new();
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.records += 1;
        let rec: ManifestRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                report.schema_violations.push(format!("line {}: {e}", i + 1));
                continue;
            }
        };
        if !seen.insert(rec.id.clone()) {
            report.schema_violations.push(format!("line {}: duplicate id `{}`", i + 1, rec.id));
        }
        for e in rec.schema_errors() {
            report.schema_violations.push(format!("line {}: {e}", i + 1));
        }
        for (_, rel) in rec.files() {
            if !root.join(rel).is_file() {
                report.missing_files.push(format!("{}: {rel}", rec.id));
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayReport {
    pub records: usize,
    pub files_checked: usize,
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-renders every derived file from the recorded parameters and compares
/// bytes with what is on disk. `cfg` is only consulted for file-backed
/// extractors.
pub fn replay_manifest(path: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<ReplayReport> {
    let path = path.as_ref();
    let root = root_of(path);
    let mut report = ReplayReport::default();
    for rec in read_manifest(path)? {
        report.records += 1;
        let expected = rerender(&root, &rec, cfg)?;
        for (rel, bytes) in expected {
            report.files_checked += 1;
            match std::fs::read(root.join(&rel)) {
                Ok(on_disk) if on_disk == bytes => {}
                Ok(_) => report.mismatches.push(format!("{}: {rel} differs", rec.id)),
                Err(e) => report.mismatches.push(format!("{}: {rel}: {e}", rec.id)),
            }
        }
    }
    Ok(report)
}

fn need<'a>(rec: &'a ManifestRecord, field: &'a Option<String>, name: &str) -> Result<&'a str> {
    field.as_deref().ok_or_else(|| DatasetError::Manifest { line: 0, message: format!("{}: missing `{name}`", rec.id) })
}

/// The derived files of `rec`, recomputed from its primary files.
pub fn rerender(root: &Path, rec: &ManifestRecord, cfg: &DatasetConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let load = |rel: &str| -> Result<Raster> { Ok(Raster::load(root.join(rel))?.to_rgb()) };
    let load_mask = |rel: &str| -> Result<Mask> { Ok(Mask::load(root.join(rel))?) };
    let target = load(&rec.target)?;
    let mut out = vec![(rec.target.clone(), target.to_png_bytes()?)];
    match &rec.params {
        Params::Content { augmentation, background_strokes, bbox_margin, background_fill } => {
            let fg_rel = need(rec, &rec.fg_mask, "fg_mask")?;
            let fg = load_mask(fg_rel)?;
            let r = render_content(&target, &fg, augmentation, background_strokes, *bbox_margin, *background_fill)?;
            out.push((need(rec, &rec.input, "input")?.to_string(), r.input.to_png_bytes()?));
            out.push((need(rec, &rec.background_mask, "background_mask")?.to_string(), r.background_mask.to_png_bytes()?));
            out.push((fg_rel.to_string(), fg.to_png_bytes()?));
        }
        Params::Structural { extractor, canny } => {
            let cue = replay_structural_cue(&target, &rec.source, extractor, *canny, cfg)?;
            out.push((need(rec, &rec.cue, "cue")?.to_string(), cue.to_png_bytes()?));
        }
        Params::Color { cue_width, cue_height } => {
            let cue = color_cue(&target, *cue_width, *cue_height);
            out.push((need(rec, &rec.cue, "cue")?.to_string(), cue.to_png_bytes()?));
        }
        Params::Spatial { mask_params, .. } => {
            let input_rel = need(rec, &rec.input, "input")?;
            let source = load(input_rel)?;
            out.push((input_rel.to_string(), source.to_png_bytes()?));
            let mask_rel = need(rec, &rec.mask, "mask")?.to_string();
            match replay_spatial_mask(&source, &target, mask_params)? {
                Some(m) => out.push((mask_rel, m.to_png_bytes()?)),
                None => out.push((mask_rel, Vec::new())),
            }
        }
        Params::Removal { offset } => {
            let fg_rel = need(rec, &rec.fg_mask, "fg_mask")?;
            let fg = load_mask(fg_rel)?;
            let pair = paste_foreground(&target, &fg, offset[0], offset[1])?;
            out.push((need(rec, &rec.input, "input")?.to_string(), pair.input.to_png_bytes()?));
            out.push((need(rec, &rec.mask, "mask")?.to_string(), pair.mask.to_png_bytes()?));
            out.push((fg_rel.to_string(), fg.to_png_bytes()?));
        }
    }
    Ok(out)
}
