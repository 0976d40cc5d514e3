use std::path::Path;

use layered_core::compositor::degrade_color_map;
use layered_core::mask::synthesize_removal_pair;
use layered_core::{Mask, Raster};
use layered_dataset::build::{
    build_color_sample, build_content_sample, build_removal_batch, build_structural_sample, registry, sample_rng,
    RemovalInput, SampleMeta,
};
use layered_dataset::manifest::{read_manifest, replay_manifest, validate_manifest, write_dataset};
use layered_dataset::{run_build, BuildRequest, DatasetConfig, Pipeline};

fn scene(size: usize, k: usize) -> (Raster, Mask) {
    let (cx, cy, r) = (size as f64 * (0.35 + 0.05 * (k % 3) as f64), size as f64 * 0.45, size as f64 * 0.18);
    let inside = |x: usize, y: usize| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r;
    let img = Raster::from_fn(size, size, 3, |x, y, c| {
        if inside(x, y) {
            [0.9, 0.2 + 0.1 * (k % 4) as f64, 0.1][c]
        } else {
            (0.2 + 0.6 * x as f64 / size as f64 + 0.05 * c as f64).min(1.0)
        }
    });
    (img, Mask::from_fn(size, size, inside))
}

fn quantized(r: &Raster) -> Raster {
    Raster::from_png_bytes(&r.to_png_bytes().unwrap()).unwrap()
}

fn decode(bytes: &[u8]) -> Raster {
    Raster::from_png_bytes(bytes).unwrap()
}

#[test]
fn degenerate_content_pipeline_keeps_y_equal_to_x() {
    let (img, m) = scene(48, 0);
    let meta = SampleMeta::new(Pipeline::Content, "a", 1, 0);
    let s = build_content_sample(&meta, &img, &m, "a ball", &DatasetConfig::degenerate(), &mut meta.rng()).unwrap();
    let x = s.file(&s.record.target).unwrap();
    let y = s.file(s.record.input.as_deref().unwrap()).unwrap();
    assert_eq!(x, y);
}

#[test]
fn content_changes_only_fg_box_and_background_masks() {
    let cfg = DatasetConfig::default();
    let mut saw_bg = false;
    for k in 0..12u64 {
        let (img, m) = scene(64, k as usize);
        let meta = SampleMeta::new(Pipeline::Content, "s", 9, k);
        let s = build_content_sample(&meta, &img, &m, "", &cfg, &mut meta.rng()).unwrap();
        let x = decode(s.file(&s.record.target).unwrap());
        let y = decode(s.file(s.record.input.as_deref().unwrap()).unwrap());
        let bg = Mask::from_png_bytes(s.file(s.record.background_mask.as_deref().unwrap()).unwrap()).unwrap();
        saw_bg |= !bg.is_empty();
        let (x0, y0, x1, y1) = m.bbox().unwrap();
        for py in 0..64 {
            for px in 0..64 {
                let in_box = (x0..=x1).contains(&px) && (y0..=y1).contains(&py);
                if x.pixel(px, py) != y.pixel(px, py) {
                    assert!(in_box || bg.get(px, py), "sample {k}: change at ({px}, {py}) outside allowed regions");
                }
                if bg.get(px, py) {
                    assert!(!in_box);
                    assert!(y.pixel(px, py).iter().all(|&v| v == 128.0 / 255.0));
                }
            }
        }
    }
    assert!(saw_bg, "default config should paint some background");
}

#[test]
fn content_is_deterministic_per_seed() {
    let (img, m) = scene(40, 1);
    let cfg = DatasetConfig::default();
    let meta = SampleMeta::new(Pipeline::Content, "d", 5, 3);
    let a = build_content_sample(&meta, &img, &m, "c", &cfg, &mut meta.rng()).unwrap();
    let b = build_content_sample(&meta, &img, &m, "c", &cfg, &mut meta.rng()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_fg_mask_is_an_error_naming_the_sample() {
    let (img, _) = scene(32, 0);
    let meta = SampleMeta::new(Pipeline::Content, "empty", 0, 0);
    let err = build_content_sample(&meta, &img, &Mask::new(32, 32), "", &DatasetConfig::default(), &mut meta.rng()).unwrap_err();
    assert!(err.to_string().contains("content-00000-empty"), "{err}");
}

#[test]
fn structural_uniform_image_gives_empty_cue_and_no_input() {
    let cfg = DatasetConfig::default();
    let meta = SampleMeta::new(Pipeline::Structural, "flat", 0, 0);
    let s = build_structural_sample(&meta, &Raster::filled(32, 32, 3, 0.4), "", &cfg, &registry(&cfg), &mut meta.rng()).unwrap();
    let cue = decode(s.file(s.record.cue.as_deref().unwrap()).unwrap());
    assert!(cue.data().iter().all(|&v| v == 0.0));
    let json = serde_json::to_value(&s.record).unwrap();
    assert!(json.get("input").is_none());
}

#[test]
fn color_cue_matches_recomputed_degradation() {
    let (img, _) = scene(48, 2);
    for size in [None, Some(24)] {
        let cfg = DatasetConfig { color_cue_size: size, ..Default::default() };
        let meta = SampleMeta::new(Pipeline::Color, "c", 0, 0);
        let s = build_color_sample(&meta, &img, "", &cfg).unwrap();
        let side = size.unwrap_or(48);
        let expected = quantized(&degrade_color_map(&img, side, side));
        assert_eq!(decode(s.file(s.record.cue.as_deref().unwrap()).unwrap()), expected);
        assert!(serde_json::to_value(&s.record).unwrap().get("input").is_none());
    }
}

#[test]
fn removal_batch_delegates_and_stays_in_bounds() {
    let inputs: Vec<RemovalInput> = (0..3)
        .map(|k| {
            let (image, fg_mask) = scene(40, k);
            RemovalInput { source: format!("r{k}"), image, fg_mask, caption: String::new() }
        })
        .collect();

    let one = build_removal_batch(&inputs, 77, 1).unwrap();
    assert_eq!(one.len(), 1);
    let direct = synthesize_removal_pair(&inputs[0].image, &inputs[0].fg_mask, &mut sample_rng(77, 0)).unwrap();
    let r = &one[0];
    assert_eq!(decode(r.file(r.record.input.as_deref().unwrap()).unwrap()), quantized(&direct.input));
    assert_eq!(Mask::from_png_bytes(r.file(r.record.mask.as_deref().unwrap()).unwrap()).unwrap(), direct.mask);

    let batch = build_removal_batch(&inputs, 3, 25).unwrap();
    assert_eq!(batch.len(), 25);
    for s in &batch {
        assert_eq!(s.record.pipeline(), Pipeline::Removal);
        let m = Mask::from_png_bytes(s.file(s.record.mask.as_deref().unwrap()).unwrap()).unwrap();
        assert_eq!(m.size(), (40, 40));
        assert!(!m.is_empty());
    }
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &batch).unwrap();
    assert_eq!(read_manifest(&manifest).unwrap().len(), 25);
    assert!(build_removal_batch(&inputs, 0, 0).is_err());
    assert!(build_removal_batch(&[], 0, 1).is_err());
}

fn write_inputs(dir: &Path, n: usize, size: usize) {
    for k in 0..n {
        let (img, m) = scene(size, k);
        img.save_png(dir.join(format!("img{k:02}.png"))).unwrap();
        m.save_png(dir.join(format!("img{k:02}_mask.png"))).unwrap();
        std::fs::write(dir.join(format!("img{k:02}.txt")), format!("object {k}\n")).unwrap();
        let mut edited = img.clone();
        for y in 0..size {
            for x in 0..size {
                if m.get(x, y) {
                    edited.pixel_mut(x, y).copy_from_slice(&[0.1, 0.3, 0.9]);
                }
            }
        }
        edited.save_png(dir.join(format!("img{k:02}_edited.png"))).unwrap();
    }
}

#[test]
fn every_pipeline_builds_validates_and_replays() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path(), 6, 48);
    let cfg = DatasetConfig::default();
    for pipeline in Pipeline::ALL {
        let out = tempfile::tempdir().unwrap();
        let req = BuildRequest { pipeline, input_dir: input.path().into(), out_dir: out.path().into(), seed: 4, workers: 2 };
        let summary = run_build(&req, &cfg).unwrap();
        assert_eq!(summary.produced, 6, "{pipeline}: {:?}", summary.rejections);
        assert!(summary.succeeded(cfg.min_success_ratio));
        let v = validate_manifest(&summary.manifest).unwrap();
        assert!(v.is_clean(), "{pipeline}: {v:?}");
        assert_eq!(v.records, 6);
        let r = replay_manifest(&summary.manifest, &cfg).unwrap();
        assert!(r.is_exact(), "{pipeline}: {:?}", r.mismatches);
        let recs = read_manifest(&summary.manifest).unwrap();
        assert_eq!(recs[0].caption, "object 0");
        assert!(recs.iter().all(|r| r.pipeline() == pipeline));
    }
}

#[test]
fn worker_count_does_not_change_output() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path(), 5, 40);
    let cfg = DatasetConfig::default();
    let build = |workers| {
        let out = tempfile::tempdir().unwrap();
        let req = BuildRequest { pipeline: Pipeline::Content, input_dir: input.path().into(), out_dir: out.path().into(), seed: 11, workers };
        let s = run_build(&req, &cfg).unwrap();
        let manifest = std::fs::read(&s.manifest).unwrap();
        let files: Vec<Vec<u8>> = read_manifest(&s.manifest)
            .unwrap()
            .iter()
            .flat_map(|r| r.files().into_iter().map(|(_, p)| std::fs::read(out.path().join(p)).unwrap()).collect::<Vec<_>>())
            .collect();
        (manifest, files)
    };
    assert_eq!(build(1), build(3));
}

#[test]
fn tampered_file_is_caught_by_replay_and_missing_file_by_validation() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path(), 3, 40);
    let out = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::default();
    let req = BuildRequest { pipeline: Pipeline::Content, input_dir: input.path().into(), out_dir: out.path().into(), seed: 2, workers: 1 };
    let s = run_build(&req, &cfg).unwrap();
    let recs = read_manifest(&s.manifest).unwrap();
    let y_path = out.path().join(recs[1].input.as_deref().unwrap());
    let mut y = Raster::load(&y_path).unwrap();
    y.set(0, 0, 0, 1.0 - y.get(0, 0, 0));
    y.save_png(&y_path).unwrap();
    let r = replay_manifest(&s.manifest, &cfg).unwrap();
    assert_eq!(r.mismatches.len(), 1, "{:?}", r.mismatches);

    std::fs::remove_file(out.path().join(recs[2].background_mask.as_deref().unwrap())).unwrap();
    let v = validate_manifest(&s.manifest).unwrap();
    assert_eq!(v.missing_files.len(), 1);
    assert!(v.schema_violations.is_empty());
}

#[test]
fn spatial_rejections_are_reported_and_count_against_success() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path(), 4, 48);
    // An unchanged pair yields no mask.
    let (img, _) = scene(48, 0);
    img.save_png(input.path().join("same.png")).unwrap();
    img.save_png(input.path().join("same_edited.png")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::default();
    let req = BuildRequest { pipeline: Pipeline::Spatial, input_dir: input.path().into(), out_dir: out.path().into(), seed: 0, workers: 1 };
    let s = run_build(&req, &cfg).unwrap();
    assert_eq!((s.attempted, s.produced), (5, 4));
    assert_eq!(s.rejections.len(), 1);
    assert!(s.rejections[0].id.contains("same"));
    assert!(!s.succeeded(0.95));
    assert!(validate_manifest(&s.manifest).unwrap().is_clean());
}

#[test]
fn content_input_missing_mask_is_rejected_not_fatal() {
    let input = tempfile::tempdir().unwrap();
    write_inputs(input.path(), 2, 32);
    std::fs::remove_file(input.path().join("img01_mask.png")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let req = BuildRequest { pipeline: Pipeline::Content, input_dir: input.path().into(), out_dir: out.path().into(), seed: 0, workers: 1 };
    let s = run_build(&req, &DatasetConfig::default()).unwrap();
    assert_eq!((s.attempted, s.produced, s.rejections.len()), (2, 1, 1));
}
