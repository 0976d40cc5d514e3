//! The toy multi-stream diffusion transformer.
//!
//! Token layout per call is `[task tokens; noisy image; context?; cues…]`.
//! All streams share the Q/K/V projections; image and context rows add a
//! content LoRA, cue rows add a per-kind control LoRA, and attention is biased
//! by the per-cue strengths.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use layered_core::attention::{
    build_bias, remap_positions, CueId, ModulationSpec, StreamLayout, StreamRole, ZeroStrengthMode,
};
use layered_core::compositor::CueKind;
use layered_core::Raster;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ToyModelConfig;
use crate::error::{DitError, Result};
use crate::tape::{Tape, Var};

/// Channels of the raster a cue of this kind is given as.
pub fn cue_channels(kind: CueKind) -> usize {
    match kind {
        CueKind::Spatial | CueKind::Structural => 1,
        CueKind::Color => 3,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CueInput {
    pub kind: CueKind,
    pub map: Raster,
    pub sigma: f64,
}

/// Everything besides the noisy image that a forward pass sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub task: usize,
    pub context: Option<Raster>,
    pub cues: Vec<CueInput>,
    pub mode: ZeroStrengthMode,
}

impl Conditioning {
    pub fn new(task: usize) -> Self {
        Self { task, context: None, cues: Vec::new(), mode: ZeroStrengthMode::Verbatim }
    }

    pub fn with_cue(mut self, kind: CueKind, map: Raster, sigma: f64) -> Self {
        self.cues.push(CueInput { kind, map, sigma });
        self
    }

    pub fn with_context(mut self, context: Raster) -> Self {
        self.context = Some(context);
        self
    }

    pub fn with_mode(mut self, mode: ZeroStrengthMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn set_sigma(&mut self, kind: CueKind, sigma: f64) {
        for c in self.cues.iter_mut().filter(|c| c.kind == kind) {
            c.sigma = sigma;
        }
    }

    pub fn without_cue(&self, kind: CueKind) -> Self {
        let mut c = self.clone();
        c.cues.retain(|cue| cue.kind != kind);
        c
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Array2<f64>) -> usize {
        let id = self.values.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.lookup.get(name).map(|&i| &self.values[i])
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(|v| v.dim()).collect()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn is_lora(&self, id: usize) -> bool {
        self.names[id].contains("lora")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Lora {
    a: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    mod_w: usize,
    mod_b: usize,
    qkv: [usize; 3],
    content: [Lora; 3],
    control: [[Lora; 3]; 3],
    wo: usize,
    bo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    x_w: usize,
    x_b: usize,
    cue_w: [usize; 3],
    cue_b: [usize; 3],
    task: usize,
    stream: usize,
    t1_w: usize,
    t1_b: usize,
    t2_w: usize,
    t2_b: usize,
    blocks: Vec<BlockIds>,
    final_w: usize,
    final_b: usize,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDit {
    config: ToyModelConfig,
    params: ParamStore,
    ids: Ids,
}

const STREAM_TEXT: usize = 0;
const STREAM_X: usize = 1;
const STREAM_Y: usize = 2;
const STREAM_CUE0: usize = 3;

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("std is positive");
        let v = Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut *self.rng));
        self.store.add(name, v)
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize) -> usize {
        self.normal(name.to_string(), out, inp, 1.0 / (inp as f64).sqrt())
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.store.add(name, Array2::zeros((rows, cols)))
    }

    fn lora(&mut self, prefix: &str, d: usize, r: usize) -> Lora {
        let a = self.normal(format!("{prefix}.lora_a"), r, d, 1.0 / (d as f64).sqrt());
        let b = self.zeros(format!("{prefix}.lora_b"), d, r);
        Lora { a, b }
    }
}

/// `(rows × cols)` grid of patches flattened row-major; each patch vector is
/// ordered `(dy, dx, channel)`.
pub fn patchify(r: &Raster, patch: usize) -> Array2<f64> {
    let (w, h) = r.size();
    let c = r.channels();
    let (gw, gh) = (w / patch, h / patch);
    let mut out = Array2::zeros((gw * gh, patch * patch * c));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..c {
                        row[k] = r.get(gx * patch + dx, gy * patch + dy, ch);
                        k += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn unpatchify(tokens: &Array2<f64>, size: usize, channels: usize, patch: usize) -> Raster {
    let g = size / patch;
    let mut r = Raster::new(size, size, channels);
    for gy in 0..g {
        for gx in 0..g {
            let row = tokens.row(gy * g + gx);
            let mut k = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..channels {
                        r.set(gx * patch + dx, gy * patch + dy, ch, row[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    r
}

/// Fixed sinusoidal encoding of `(P_i, P_j)`; half the width per axis.
pub fn position_encoding(positions: &[(f64, f64)], d: usize) -> Array2<f64> {
    let quarter = d / 4;
    let mut out = Array2::zeros((positions.len(), d));
    for (n, &(pi, pj)) in positions.iter().enumerate() {
        for k in 0..quarter {
            let w = 10000f64.powf(-(k as f64) / quarter as f64);
            out[[n, 2 * k]] = (pi * w).sin();
            out[[n, 2 * k + 1]] = (pi * w).cos();
            out[[n, d / 2 + 2 * k]] = (pj * w).sin();
            out[[n, d / 2 + 2 * k + 1]] = (pj * w).cos();
        }
    }
    out
}

pub fn time_encoding(t: f64, d: usize) -> Array2<f64> {
    let half = d / 2;
    let mut out = Array2::zeros((1, d));
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        out[[0, k]] = (1000.0 * t * w).sin();
        out[[0, half + k]] = (1000.0 * t * w).cos();
    }
    out
}

/// Lazily puts parameters on the tape, at most once each.
struct Binder<'a> {
    values: &'a [Array2<f64>],
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    fn new(values: &'a [Array2<f64>]) -> Self {
        Self { values, vars: vec![None; values.len()] }
    }

    fn get(&mut self, tape: &mut Tape, id: usize) -> Var {
        *self.vars[id].get_or_insert_with(|| tape.param(id, self.values[id].clone()))
    }
}

impl ToyDit {
    pub fn new(config: ToyModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = config.d_model;
        let p = config.patch_dim();
        let hidden = config.mlp_hidden();
        let rc = config.lora_rank_content;
        let rk = config.control_rank();
        let pp = config.patch_size * config.patch_size;
        let mut init = Init { rng: &mut rng, store: &mut store };
        let x_w = init.linear("embed.x.w", d, p);
        let x_b = init.zeros("embed.x.b".into(), 1, d);
        let mut cue_w = [0; 3];
        let mut cue_b = [0; 3];
        for kind in CueKind::ALL {
            let k = kind.cue_id().0 as usize;
            cue_w[k] = init.linear(&format!("embed.cue{k}.w"), d, pp * cue_channels(kind));
            cue_b[k] = init.zeros(format!("embed.cue{k}.b"), 1, d);
        }
        let task = init.normal("embed.task".into(), config.num_tasks * config.task_tokens, d, 0.5);
        let stream = init.normal("embed.stream".into(), STREAM_CUE0 + 3, d, 0.5);
        let t1_w = init.linear("time.w1", d, d);
        let t1_b = init.zeros("time.b1".into(), 1, d);
        let t2_w = init.linear("time.w2", d, d);
        let t2_b = init.zeros("time.b2".into(), 1, d);
        let mut blocks = Vec::with_capacity(config.blocks);
        for bi in 0..config.blocks {
            let pre = format!("block{bi}");
            let mod_w = init.normal(format!("{pre}.mod.w"), 6 * d, d, 0.02);
            let mod_b = init.zeros(format!("{pre}.mod.b"), 1, 6 * d);
            let qkv = ["q", "k", "v"].map(|n| init.linear(&format!("{pre}.attn.w{n}"), d, d));
            let content = ["q", "k", "v"].map(|n| init.lora(&format!("{pre}.attn.{n}.content"), d, rc));
            let control = [0, 1, 2].map(|k| ["q", "k", "v"].map(|n| init.lora(&format!("{pre}.attn.{n}.cue{k}"), d, rk)));
            let wo = init.linear(&format!("{pre}.attn.wo"), d, d);
            let bo = init.zeros(format!("{pre}.attn.bo"), 1, d);
            let w1 = init.linear(&format!("{pre}.mlp.w1"), hidden, d);
            let b1 = init.zeros(format!("{pre}.mlp.b1"), 1, hidden);
            let w2 = init.linear(&format!("{pre}.mlp.w2"), d, hidden);
            let b2 = init.zeros(format!("{pre}.mlp.b2"), 1, d);
            blocks.push(BlockIds { mod_w, mod_b, qkv, content, control, wo, bo, w1, b1, w2, b2 });
        }
        let final_w = init.normal("final.mod.w".into(), 2 * d, d, 0.02);
        let final_b = init.zeros("final.mod.b".into(), 1, 2 * d);
        let out_w = init.normal("final.out.w".into(), p, d, 0.02);
        let out_b = init.zeros("final.out.b".into(), 1, p);
        let ids = Ids {
            x_w,
            x_b,
            cue_w,
            cue_b,
            task,
            stream,
            t1_w,
            t1_b,
            t2_w,
            t2_b,
            blocks,
            final_w,
            final_b,
            out_w,
            out_b,
        };
        Ok(Self { config, params: store, ids })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint).
    pub fn from_tensors(config: ToyModelConfig, tensors: Vec<(String, Array2<f64>)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.params.len() {
            return Err(DitError::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let id = model.params.id(&name).ok_or_else(|| DitError::Checkpoint(format!("unknown tensor {name}")))?;
            if model.params.values[id].dim() != value.dim() {
                return Err(DitError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    model.params.values[id].dim()
                )));
            }
            model.params.values[id] = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Fills every LoRA `B` with small random values (tests use this to make
    /// the adapter paths non-trivial).
    pub fn randomize_lora(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("std is positive");
        for id in 0..self.params.len() {
            if self.params.names[id].ends_with("lora_b") {
                self.params.values[id].mapv_inplace(|_| dist.sample(&mut rng));
            }
        }
    }

    fn check_raster(&self, r: &Raster, size: usize, channels: usize, what: &str) -> Result<()> {
        if r.size() != (size, size) || r.channels() != channels {
            return Err(DitError::Input(format!(
                "{what} must be {size}x{size}x{channels}, got {}x{}x{}",
                r.width(),
                r.height(),
                r.channels()
            )));
        }
        if !r.is_finite() {
            return Err(DitError::Input(format!("{what} contains non-finite values")));
        }
        Ok(())
    }

    /// Resizes and converts an arbitrary raster into the cue format this
    /// model expects for `kind`.
    pub fn prepare_cue(&self, kind: CueKind, map: &Raster) -> Raster {
        let r = self.config.cue_resolution;
        let resized = if map.size() == (r, r) { map.clone() } else { map.resize_area(r, r) };
        match cue_channels(kind) {
            1 => resized.to_gray(),
            _ => resized.to_rgb(),
        }
    }

    fn sorted_cues<'c>(&self, cond: &'c Conditioning) -> Result<Vec<&'c CueInput>> {
        let mut cues: Vec<&CueInput> = cond.cues.iter().collect();
        cues.sort_by_key(|c| c.kind.cue_id());
        for w in cues.windows(2) {
            if w[0].kind == w[1].kind {
                return Err(DitError::Input(format!("cue {:?} given twice", w[0].kind)));
            }
        }
        Ok(cues)
    }

    /// Builds the forward graph on `tape`; returns the predicted velocity as
    /// image tokens (`grid² × patch_dim`).
    pub fn forward(&self, tape: &mut Tape, z: &Raster, t: f64, cond: &Conditioning) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let s = cfg.image_size;
        if !(0.0..=1.0).contains(&t) {
            return Err(DitError::Input(format!("t must lie in [0, 1], got {t}")));
        }
        if cond.task >= cfg.num_tasks {
            return Err(DitError::Input(format!("task id {} out of range 0..{}", cond.task, cfg.num_tasks)));
        }
        self.check_raster(z, s, cfg.channels, "noisy image")?;
        if let Some(y) = &cond.context {
            self.check_raster(y, s, cfg.channels, "context image")?;
        }
        let cues = self.sorted_cues(cond)?;
        for c in &cues {
            self.check_raster(&c.map, cfg.cue_resolution, cue_channels(c.kind), "cue map")?;
        }

        let ids = &self.ids;
        let mut b = Binder::new(&self.params.values);
        let g = cfg.grid();
        let n = cfg.image_tokens();
        let image_pos = position_encoding(&remap_positions(g, g, g, g)?, d);
        let gc = cfg.cue_grid();
        let cue_pos = position_encoding(&remap_positions(gc, gc, g, g)?, d);

        let stream = b.get(tape, ids.stream);
        let stream_row = |tape: &mut Tape, i: usize| tape.slice_rows(stream, i..i + 1);

        let mut parts: Vec<(StreamRole, usize)> = Vec::new();
        let mut tokens: Vec<Var> = Vec::new();

        let task_all = b.get(tape, ids.task);
        let tt = cfg.task_tokens;
        let text = tape.slice_rows(task_all, cond.task * tt..(cond.task + 1) * tt);
        let sr = stream_row(tape, STREAM_TEXT);
        tokens.push(tape.add_row(text, sr));
        parts.push((StreamRole::Text, tt));

        let (xw, xb) = (b.get(tape, ids.x_w), b.get(tape, ids.x_b));
        let embed_image = |tape: &mut Tape, img: &Raster, which: usize| {
            let pt = tape.constant(patchify(img, cfg.patch_size));
            let e = tape.matmul_t(pt, xw);
            let e = tape.add_row(e, xb);
            let pos = tape.constant(image_pos.clone());
            let e = tape.add(e, pos);
            let sr = stream_row(tape, which);
            tape.add_row(e, sr)
        };
        tokens.push(embed_image(tape, z, STREAM_X));
        parts.push((StreamRole::NoisyImage, n));
        if let Some(y) = &cond.context {
            tokens.push(embed_image(tape, y, STREAM_Y));
            parts.push((StreamRole::Context, n));
        }
        let mut spec = ModulationSpec::new();
        for c in &cues {
            let k = c.kind.cue_id().0 as usize;
            let pt = tape.constant(patchify(&c.map, cfg.patch_size));
            let w = b.get(tape, ids.cue_w[k]);
            let bias = b.get(tape, ids.cue_b[k]);
            let e = tape.matmul_t(pt, w);
            let e = tape.add_row(e, bias);
            let pos = tape.constant(cue_pos.clone());
            let e = tape.add(e, pos);
            let sr = stream_row(tape, STREAM_CUE0 + k);
            tokens.push(tape.add_row(e, sr));
            parts.push((StreamRole::Cue(c.kind.cue_id()), gc * gc));
            spec = spec.with(c.kind.cue_id(), c.sigma);
        }
        let layout = StreamLayout::new(&parts)?;
        let bias = Arc::new(build_bias(&layout, &spec, cond.mode)?);
        let mut h = tape.concat_rows(&tokens);

        let te = tape.constant(time_encoding(t, d));
        let (w1, b1, w2, b2) = (b.get(tape, ids.t1_w), b.get(tape, ids.t1_b), b.get(tape, ids.t2_w), b.get(tape, ids.t2_b));
        let te = tape.matmul_t(te, w1);
        let te = tape.add_row(te, b1);
        let te = tape.silu(te);
        let te = tape.matmul_t(te, w2);
        let temb = tape.add_row(te, b2);
        let st = tape.silu(temb);

        let image_rows = layout.range(StreamRole::NoisyImage).expect("noisy stream present");
        let content_rows = image_rows.start..layout.range(StreamRole::Context).map_or(image_rows.end, |r| r.end);
        let cue_rows: Vec<(usize, Range<usize>)> = layout.cues().map(|(id, r)| (id.0 as usize, r)).collect();

        for blk in &ids.blocks {
            let m = b.get(tape, blk.mod_w);
            let mb = b.get(tape, blk.mod_b);
            let m = tape.matmul_t(st, m);
            let m = tape.add_row(m, mb);
            let chunk = |tape: &mut Tape, i: usize| tape.slice_cols(m, i * d..(i + 1) * d);
            let (shift1, scale1, gate1) = (chunk(tape, 0), chunk(tape, 1), chunk(tape, 2));
            let (shift2, scale2, gate2) = (chunk(tape, 3), chunk(tape, 4), chunk(tape, 5));

            let a = tape.layer_norm(h);
            let sc = tape.add_scalar(scale1, 1.0);
            let a = tape.mul_row(a, sc);
            let a = tape.add_row(a, shift1);

            let mut qkv = [0usize; 3];
            for (j, out) in qkv.iter_mut().enumerate() {
                let w = b.get(tape, blk.qkv[j]);
                let base = tape.matmul_t(a, w);
                let mut deltas = vec![tape.constant(Array2::zeros((content_rows.start, d)))];
                let lora_delta = |tape: &mut Tape, b: &mut Binder, rows: Range<usize>, l: Lora| {
                    let za = tape.slice_rows(a, rows);
                    let aw = b.get(tape, l.a);
                    let bw = b.get(tape, l.b);
                    let low = tape.matmul_t(za, aw);
                    tape.matmul_t(low, bw)
                };
                deltas.push(lora_delta(tape, &mut b, content_rows.clone(), blk.content[j]));
                for (k, rows) in &cue_rows {
                    deltas.push(lora_delta(tape, &mut b, rows.clone(), blk.control[*k][j]));
                }
                let delta = tape.concat_rows(&deltas);
                *out = tape.add(base, delta);
            }
            let o = tape.attention(qkv[0], qkv[1], qkv[2], bias.clone(), cfg.heads)?;
            let (wo, bo) = (b.get(tape, blk.wo), b.get(tape, blk.bo));
            let o = tape.matmul_t(o, wo);
            let o = tape.add_row(o, bo);
            let gt = tape.add_scalar(gate1, 1.0);
            let o = tape.mul_row(o, gt);
            h = tape.add(h, o);

            let a = tape.layer_norm(h);
            let sc = tape.add_scalar(scale2, 1.0);
            let a = tape.mul_row(a, sc);
            let a = tape.add_row(a, shift2);
            let (w1, b1, w2, b2) = (b.get(tape, blk.w1), b.get(tape, blk.b1), b.get(tape, blk.w2), b.get(tape, blk.b2));
            let f = tape.matmul_t(a, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let f = tape.matmul_t(f, w2);
            let f = tape.add_row(f, b2);
            let gt = tape.add_scalar(gate2, 1.0);
            let f = tape.mul_row(f, gt);
            h = tape.add(h, f);
        }

        let hx = tape.slice_rows(h, image_rows);
        let (fw, fb) = (b.get(tape, ids.final_w), b.get(tape, ids.final_b));
        let fm = tape.matmul_t(st, fw);
        let fm = tape.add_row(fm, fb);
        let shift = tape.slice_cols(fm, 0..d);
        let scale = tape.slice_cols(fm, d..2 * d);
        let o = tape.layer_norm(hx);
        let sc = tape.add_scalar(scale, 1.0);
        let o = tape.mul_row(o, sc);
        let o = tape.add_row(o, shift);
        let (ow, ob) = (b.get(tape, ids.out_w), b.get(tape, ids.out_b));
        let o = tape.matmul_t(o, ow);
        Ok(tape.add_row(o, ob))
    }

    /// Predicted velocity as an image.
    pub fn predict(&self, z: &Raster, t: f64, cond: &Conditioning) -> Result<Raster> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, z, t, cond)?;
        let cfg = &self.config;
        Ok(unpatchify(tape.value(out), cfg.image_size, cfg.channels, cfg.patch_size))
    }

    /// Rectified-flow loss of one example and the gradient of every parameter.
    pub fn loss_and_grads(&self, x: &Raster, eps: &Raster, t: f64, cond: &Conditioning) -> Result<(f64, Vec<Array2<f64>>)> {
        let z = crate::flow::rf_interpolate(x, eps, t)?;
        let target = crate::flow::rf_target(x, eps)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &z, t, cond)?;
        let loss = tape.mse(out, patchify(&target, self.config.patch_size));
        let value = tape.scalar(loss);
        let grads = tape.param_grads(loss, &self.params.shapes());
        Ok((value, grads))
    }

    /// Loss alone, without building gradients.
    pub fn loss(&self, x: &Raster, eps: &Raster, t: f64, cond: &Conditioning) -> Result<f64> {
        let z = crate::flow::rf_interpolate(x, eps, t)?;
        let target = crate::flow::rf_target(x, eps)?;
        let pred = self.predict(&z, t, cond)?;
        layered_core::metrics::l2(&pred, &target).map_err(Into::into)
    }

    /// A random standard-normal image of this model's shape.
    pub fn noise(&self, rng: &mut impl Rng) -> Raster {
        let s = self.config.image_size;
        Raster::from_fn(s, s, self.config.channels, |_, _, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
    }
}

impl crate::flow::VelocityModel for ToyDit {
    fn velocity(&self, z: &Raster, t: f64, cond: &Conditioning) -> Result<Raster> {
        self.predict(z, t, cond)
    }
}

/// The cue id a kind occupies in the bias matrix.
pub fn cue_id(kind: CueKind) -> CueId {
    kind.cue_id()
}
