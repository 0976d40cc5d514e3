use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use layered_core::edges::{canny, CannyParams};
use layered_core::mask::{derive_mask, HullMode, MaskOutcome, MaskParams};
use layered_core::metrics::evaluate;
use layered_core::{Exec, Raster};
use layered_dataset::{replay_manifest, run_build, validate_manifest, BuildRequest, DatasetConfig, Pipeline};
use layered_dit::train::write_loss_csv;
use layered_dit::{checkpoint, task, train, ToyDit, ToyModelConfig, TrainConfig};
use layered_service::{AppState, LoadedModel, ServiceConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "layered", version, about = "Layered image-editing toolkit")]
struct Cli {
    /// Run data-parallel loops sequentially.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum HullArg {
    Global,
    PerComponent,
}

#[derive(Subcommand)]
enum Command {
    /// Derive a change mask from a source/edited pair.
    DeriveMask {
        #[arg(long = "src", alias = "source")]
        source: PathBuf,
        #[arg(long)]
        edited: PathBuf,
        #[arg(long = "out-mask", alias = "out")]
        out: PathBuf,
        /// CIELAB ΔE threshold.
        #[arg(long, default_value_t = layered_core::mask::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Smoothing disc radius in pixels (default scales with image size).
        #[arg(long)]
        radius: Option<usize>,
        #[arg(long, value_enum, default_value_t = HullArg::Global)]
        hull: HullArg,
    },
    /// Canny edge map of an image.
    Canny {
        input: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = CannyParams::default().sigma)]
        sigma: f64,
        #[arg(long, default_value_t = CannyParams::default().low)]
        low: f64,
        #[arg(long, default_value_t = CannyParams::default().high)]
        high: f64,
    },
    /// L1/L2/PSNR/SSIM between same-named PNGs in two directories.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long = "ref-dir", alias = "target-dir")]
        target_dir: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Build a training dataset with a JSONL manifest.
    BuildDataset {
        #[arg(long, value_parser = parse_pipeline)]
        pipeline: Pipeline,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// TOML file with rates and thresholds.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check a manifest for missing files and schema violations.
    ValidateManifest { manifest: PathBuf },
    /// Re-render a manifest's derived files and compare bytes.
    ReplayManifest {
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the toy model on the synthetic colour task.
    Train {
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch_size: usize,
        #[arg(long, default_value_t = 512)]
        examples: usize,
        /// Overrides the learning rate in the model config.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
        /// Model config as TOML; defaults otherwise.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Where to write the per-step loss (default: next to the checkpoint).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// After training, report cue adherence on this many held-out samples.
        #[arg(long, default_value_t = 0)]
        eval_samples: usize,
    },
    /// Serve the edit-session HTTP API.
    Serve {
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also block text and context tokens from cues whose σ is 0.
        #[arg(long)]
        strict_sigma_zero: bool,
        #[arg(long, default_value_t = 1024)]
        max_image_side: usize,
        /// Default generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        generation_workers: usize,
        /// Built canvas UI to serve at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

fn parse_pipeline(s: &str) -> Result<Pipeline, String> {
    s.parse()
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match run(cli.command, exec) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn load_dataset_config(path: Option<&Path>) -> Result<DatasetConfig> {
    match path {
        Some(p) => DatasetConfig::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(DatasetConfig::default()),
    }
}

fn run(cmd: Command, exec: Exec) -> Result<ExitCode> {
    match cmd {
        Command::DeriveMask { source, edited, out, threshold, radius, hull } => {
            let hull = match hull {
                HullArg::Global => HullMode::Global,
                HullArg::PerComponent => HullMode::PerComponent,
            };
            let src = Raster::load(&source).with_context(|| format!("reading {}", source.display()))?;
            let ed = Raster::load(&edited).with_context(|| format!("reading {}", edited.display()))?;
            match derive_mask(&src, &ed, &MaskParams { threshold, radius, hull })? {
                MaskOutcome::Accepted(m) => {
                    m.mask.save_png(&out)?;
                    print_json(&serde_json::json!({
                        "accepted": true, "ratio": m.hull_area_ratio, "threshold": m.threshold, "radius": m.radius,
                    }))?;
                    Ok(ExitCode::SUCCESS)
                }
                MaskOutcome::Rejected { reason, ratio, threshold } => {
                    print_json(&serde_json::json!({ "accepted": false, "reason": reason, "ratio": ratio, "threshold": threshold }))?;
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Canny { input, out, sigma, low, high } => {
            let img = Raster::load(&input).with_context(|| format!("reading {}", input.display()))?;
            canny(&img, &CannyParams { sigma, low, high })?.save_png(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { pred_dir, target_dir, report } => {
            let mut names: Vec<_> = std::fs::read_dir(&pred_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            names.sort();
            let mut pairs = Vec::new();
            for p in names {
                let t = target_dir.join(p.file_name().expect("file"));
                if !t.is_file() {
                    bail!("no target for {}", p.display());
                }
                pairs.push((Raster::load(&p)?, Raster::load(&t)?));
            }
            if pairs.is_empty() {
                bail!("no PNG files in {}", pred_dir.display());
            }
            let metrics = evaluate(&pairs, exec)?;
            if let Some(path) = report {
                std::fs::write(&path, serde_json::to_vec_pretty(&metrics)?).with_context(|| format!("writing {}", path.display()))?;
            }
            print_json(&metrics)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::BuildDataset { pipeline, input_dir, out_dir, seed, workers, config } => {
            let cfg = load_dataset_config(config.as_deref())?;
            let workers = if exec == Exec::Sequential { 1 } else { workers };
            let req = BuildRequest { pipeline, input_dir, out_dir, seed, workers };
            let summary = run_build(&req, &cfg)?;
            for r in &summary.rejections {
                eprintln!("rejected {}: {}", r.id, r.reason);
            }
            let ok = summary.succeeded(cfg.min_success_ratio);
            print_json(&serde_json::json!({
                "pipeline": summary.pipeline,
                "manifest": summary.manifest,
                "attempted": summary.attempted,
                "produced": summary.produced,
                "rejected": summary.rejections.len(),
                "success_ratio": summary.success_ratio(),
                "ok": ok,
            }))?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::ValidateManifest { manifest } => {
            let r = validate_manifest(&manifest)?;
            for m in &r.missing_files {
                eprintln!("missing: {m}");
            }
            for s in &r.schema_violations {
                eprintln!("schema: {s}");
            }
            println!("{} records, {} missing files, {} schema violations", r.records, r.missing_files.len(), r.schema_violations.len());
            Ok(if r.is_clean() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::ReplayManifest { manifest, config } => {
            let cfg = load_dataset_config(config.as_deref())?;
            let r = replay_manifest(&manifest, &cfg)?;
            for m in &r.mismatches {
                eprintln!("mismatch: {m}");
            }
            println!("{} records, {} files checked, {} mismatches", r.records, r.files_checked, r.mismatches.len());
            Ok(if r.is_exact() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Train { out, steps, batch_size, examples, lr, seed, data_seed, model_config, loss_csv, eval_samples } => {
            let cfg: ToyModelConfig = match &model_config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
                None => ToyModelConfig::default(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
            let data = task::color_dataset(&cfg, examples, &mut rng);
            let mut model = ToyDit::new(cfg, seed)?;
            let tc = TrainConfig { steps, batch_size, seed, learning_rate: lr, ..Default::default() };
            let start = Instant::now();
            let report = train(&mut model, &data, &tc, exec, |step, loss| {
                if (step + 1) % 100 == 0 || step + 1 == steps {
                    tracing::info!("step {:>5}  loss {loss:.4}  {:.1}s", step + 1, start.elapsed().as_secs_f64());
                }
            })?;
            checkpoint::save(&model, &out)?;
            let csv = loss_csv.unwrap_or_else(|| out.with_extension("loss.csv"));
            write_loss_csv(&csv, &report.losses)?;
            let w = 100.min(steps);
            let mut summary = serde_json::json!({
                "checkpoint": out,
                "loss_csv": csv,
                "first_mean_loss": report.mean(0..w),
                "last_mean_loss": report.mean(steps - w..steps),
                "window": w,
                "seconds": start.elapsed().as_secs_f64(),
            });
            if eval_samples > 0 {
                let held_out = task::color_dataset(model.config(), eval_samples, &mut rng);
                let (on, off) = task::cue_adherence(&model, &held_out, 1000, model.config().denoise_steps)?;
                summary["cue_l1_sigma1"] = on.into();
                summary["cue_l1_sigma0"] = off.into();
            }
            print_json(&summary)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { port, host, checkpoint: ckpt, strict_sigma_zero, max_image_side, seed, generation_workers, static_dir } => {
            let model = match &ckpt {
                Some(p) => {
                    let m = checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
                    let loaded = LoadedModel::new(m);
                    tracing::info!("checkpoint {} (tag {})", p.display(), loaded.tag);
                    Some(loaded)
                }
                None => {
                    tracing::warn!("no --checkpoint given; /generate will answer 503");
                    None
                }
            };
            let config = ServiceConfig { max_image_side, strict_sigma_zero, seed, generation_workers, static_dir, ..Default::default() };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(layered_service::serve(SocketAddr::new(host, port), AppState::new(config, model)))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
