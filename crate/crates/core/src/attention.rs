//! Multi-stream attention with per-cue modulation.
//!
//! Token streams are concatenated in the fixed order
//! `[text; noisy image; context; cue_1 … cue_K]`. Image-like streams share one
//! set of QKV projections; cue streams add a low-rank update on top of the
//! same projections. An additive bias matrix then scales how strongly the
//! noisy-image tokens look at each cue (`log σ_k`) and walls every cue off
//! from all other streams.
//!
//! Blocked entries never go through `exp`: their weight is the literal `0.0`,
//! so the isolation guarantees hold exactly rather than approximately.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_mismatch, Error, Result};

/// Identifier of one visual cue within an attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CueId(pub u32);

impl fmt::Display for CueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cue{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamRole {
    Text,
    NoisyImage,
    Context,
    Cue(CueId),
}

impl StreamRole {
    fn order_rank(self) -> u8 {
        match self {
            StreamRole::Text => 0,
            StreamRole::NoisyImage => 1,
            StreamRole::Context => 2,
            StreamRole::Cue(_) => 3,
        }
    }
}

/// A role-tagged block of token features (`N × d`, one token per row).
#[derive(Clone, Debug)]
pub struct TokenStream {
    role: StreamRole,
    features: Array2<f64>,
    positions: Option<Vec<(f64, f64)>>,
}

impl TokenStream {
    pub fn new(role: StreamRole, features: Array2<f64>, positions: Option<Vec<(f64, f64)>>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(invalid("token stream must hold at least one token"));
        }
        match (&role, &positions) {
            (StreamRole::Text, Some(_)) => return Err(invalid("text tokens carry no positions")),
            (_, Some(p)) if p.len() != features.nrows() => {
                return Err(shape_mismatch(features.nrows(), p.len()));
            }
            _ => {}
        }
        Ok(Self { role, features, positions })
    }

    pub fn role(&self) -> StreamRole {
        self.role
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn positions(&self) -> Option<&[(f64, f64)]> {
        self.positions.as_deref()
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Shared `d × d` projection matrices. Each maps a token `z` to `W · z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl ProjectionWeights {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        let d = q.nrows();
        for (name, w) in [("W_Q", &q), ("W_K", &k), ("W_V", &v)] {
            if w.nrows() != d || w.ncols() != d {
                return Err(invalid(format!("{name} must be {d}x{d}, got {:?}", w.dim())));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { q, k, v })
    }

    pub fn identity(d: usize) -> Self {
        let eye = Array2::eye(d);
        Self { q: eye.clone(), k: eye.clone(), v: eye }
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }
}

/// Low-rank update `B · A` added to each of the Q, K and V projections.
/// `A_*` is `r × d`, `B_*` is `d × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a_q: Array2<f64>,
    pub a_k: Array2<f64>,
    pub a_v: Array2<f64>,
    pub b_q: Array2<f64>,
    pub b_k: Array2<f64>,
    pub b_v: Array2<f64>,
}

impl LoraAdapter {
    /// All-zero adapter of the given rank: a no-op until trained.
    pub fn zeros(d: usize, rank: usize) -> Self {
        Self {
            a_q: Array2::zeros((rank, d)),
            a_k: Array2::zeros((rank, d)),
            a_v: Array2::zeros((rank, d)),
            b_q: Array2::zeros((d, rank)),
            b_k: Array2::zeros((d, rank)),
            b_v: Array2::zeros((d, rank)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a_q.nrows()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let r = self.rank();
        if r == 0 || r > d {
            return Err(invalid(format!("LoRA rank {r} must be in 1..={d}")));
        }
        for (name, a, b) in [("Q", &self.a_q, &self.b_q), ("K", &self.a_k, &self.b_k), ("V", &self.a_v, &self.b_v)] {
            if a.dim() != (r, d) {
                return Err(invalid(format!("A_{name} must be {r}x{d}, got {:?}", a.dim())));
            }
            if b.dim() != (d, r) {
                return Err(invalid(format!(
                    "rank mismatch: B_{name} must be {d}x{r} to pair with A_{name}, got {:?}",
                    b.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Per-cue guidance strengths `σ_k ≥ 0`. `1` is neutral, `0` disables the cue.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub strengths: BTreeMap<CueId, f64>,
}

impl ModulationSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, cue: CueId, sigma: f64) -> Self {
        self.strengths.insert(cue, sigma);
        self
    }

    pub fn get(&self, cue: CueId) -> Option<f64> {
        self.strengths.get(&cue).copied()
    }
}

/// How `σ_k = 0` treats text and context rows.
///
/// `Verbatim` only blocks the noisy-image rows (text and context tokens may
/// still read the cue). `Strict` additionally blocks text and context rows
/// from a zero-strength cue so no cue information reaches any other stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroStrengthMode {
    #[default]
    Verbatim,
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BiasEntry {
    Value(f64),
    Blocked,
}

/// Token index ranges of each stream after concatenation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    segments: Vec<(StreamRole, Range<usize>)>,
    total: usize,
}

impl StreamLayout {
    /// Builds a layout from `(role, token count)` pairs, which must already
    /// be in concatenation order. Text, noisy image and context may each
    /// appear at most once; cue ids must be unique.
    pub fn new(parts: &[(StreamRole, usize)]) -> Result<Self> {
        let mut segments = Vec::with_capacity(parts.len());
        let mut start = 0;
        let mut last_rank = 0u8;
        let mut seen_cues = Vec::new();
        for (i, &(role, len)) in parts.iter().enumerate() {
            if len == 0 {
                return Err(invalid(format!("stream {i} is empty")));
            }
            let rank = role.order_rank();
            if i > 0 && (rank < last_rank || (rank == last_rank && rank != 3)) {
                return Err(invalid(format!(
                    "streams must follow [text; noisy; context; cues] order, got {role:?} at position {i}"
                )));
            }
            if let StreamRole::Cue(id) = role {
                if seen_cues.contains(&id) {
                    return Err(invalid(format!("duplicate cue id {id}")));
                }
                seen_cues.push(id);
            }
            last_rank = rank;
            segments.push((role, start..start + len));
            start += len;
        }
        Ok(Self { segments, total: start })
    }

    pub fn from_streams(streams: &[TokenStream]) -> Result<Self> {
        let parts: Vec<_> = streams.iter().map(|s| (s.role(), s.len())).collect();
        Self::new(&parts)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn segments(&self) -> &[(StreamRole, Range<usize>)] {
        &self.segments
    }

    pub fn range(&self, role: StreamRole) -> Option<Range<usize>> {
        self.segments.iter().find(|(r, _)| *r == role).map(|(_, rg)| rg.clone())
    }

    pub fn cues(&self) -> impl Iterator<Item = (CueId, Range<usize>)> + '_ {
        self.segments.iter().filter_map(|(r, rg)| match r {
            StreamRole::Cue(id) => Some((*id, rg.clone())),
            _ => None,
        })
    }

    /// Role of the stream containing token `i`.
    pub fn role_of(&self, i: usize) -> Option<StreamRole> {
        self.segments.iter().find(|(_, rg)| rg.contains(&i)).map(|(r, _)| *r)
    }

    /// The same layout with one cue stream removed.
    pub fn without_cue(&self, cue: CueId) -> Result<Self> {
        let parts: Vec<_> = self
            .segments
            .iter()
            .filter(|(r, _)| *r != StreamRole::Cue(cue))
            .map(|(r, rg)| (*r, rg.len()))
            .collect();
        Self::new(&parts)
    }
}

/// `L × L` additive attention-logit bias.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasMatrix {
    len: usize,
    entries: Vec<BiasEntry>,
}

impl BiasMatrix {
    /// All-zero bias (plain attention).
    pub fn zeros(len: usize) -> Self {
        Self { len, entries: vec![BiasEntry::Value(0.0); len * len] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> BiasEntry {
        self.entries[i * self.len + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, e: BiasEntry) {
        self.entries[i * self.len + j] = e;
    }

    #[inline]
    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        matches!(self.get(i, j), BiasEntry::Blocked)
    }
}

/// Maps cell `(i, j)` of a resized `h × w` grid back to the coordinates it
/// occupies on the original `H × W` grid: `(i·H/h, j·W/w)`, unrounded.
/// Row-major over the small grid.
pub fn remap_positions(h: usize, w: usize, full_h: usize, full_w: usize) -> Result<Vec<(f64, f64)>> {
    if h == 0 || w == 0 || full_h == 0 || full_w == 0 {
        return Err(invalid("grid dimensions must be positive"));
    }
    if h > full_h || w > full_w {
        return Err(invalid(format!("grid {h}x{w} is larger than the original {full_h}x{full_w}")));
    }
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(((i * full_h) as f64 / h as f64, (j * full_w) as f64 / w as f64));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Qkv {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

/// Row-wise `z ↦ W·z`, i.e. `Z · Wᵀ`.
fn apply_rowwise(z: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    z.dot(&w.t())
}

/// Shared projection for text, noisy-image and context streams.
pub fn project_qkv(stream: &TokenStream, weights: &ProjectionWeights) -> Result<Qkv> {
    if let StreamRole::Cue(id) = stream.role() {
        return Err(invalid(format!("{id} must be projected through its LoRA branch")));
    }
    check_dim(stream, weights)?;
    let z = stream.features();
    Ok(Qkv {
        q: apply_rowwise(z, &weights.q),
        k: apply_rowwise(z, &weights.k),
        v: apply_rowwise(z, &weights.v),
    })
}

/// Condition-branch projection: `W·z + B·(A·z)` for each of Q, K, V.
pub fn project_qkv_cue(stream: &TokenStream, weights: &ProjectionWeights, lora: &LoraAdapter) -> Result<Qkv> {
    if !matches!(stream.role(), StreamRole::Cue(_)) {
        return Err(invalid("the LoRA branch only projects cue streams"));
    }
    check_dim(stream, weights)?;
    lora.validate(weights.dim())?;
    let z = stream.features();
    let branch = |w: &Array2<f64>, a: &Array2<f64>, b: &Array2<f64>| apply_rowwise(z, w) + apply_rowwise(&apply_rowwise(z, a), b);
    Ok(Qkv {
        q: branch(&weights.q, &lora.a_q, &lora.b_q),
        k: branch(&weights.k, &lora.a_k, &lora.b_k),
        v: branch(&weights.v, &lora.a_v, &lora.b_v),
    })
}

fn check_dim(stream: &TokenStream, weights: &ProjectionWeights) -> Result<()> {
    if stream.dim() != weights.dim() {
        return Err(shape_mismatch(weights.dim(), stream.dim()));
    }
    Ok(())
}

/// Builds the modulation bias for a layout.
///
/// * `(noisy row, cue_k column)` → `log σ_k` (blocked when `σ_k = 0`)
/// * `(cue_k row, column outside cue_k)` → blocked
/// * everything else → `0`
///
/// Under [`ZeroStrengthMode::Strict`], text and context rows are also
/// blocked from any cue whose `σ_k = 0`.
pub fn build_bias(layout: &StreamLayout, spec: &ModulationSpec, mode: ZeroStrengthMode) -> Result<BiasMatrix> {
    let n = layout.len();
    let mut bias = BiasMatrix::zeros(n);
    let noisy = layout.range(StreamRole::NoisyImage);
    for (cue, cols) in layout.cues() {
        let sigma = spec
            .get(cue)
            .ok_or_else(|| invalid(format!("no strength given for {cue}")))?;
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("strength for {cue} must be finite and ≥ 0, got {sigma}")));
        }
        let entry = if sigma == 0.0 { BiasEntry::Blocked } else { BiasEntry::Value(sigma.ln()) };
        if let Some(rows) = noisy.clone() {
            for i in rows {
                for j in cols.clone() {
                    bias.set(i, j, entry);
                }
            }
        }
        if sigma == 0.0 && mode == ZeroStrengthMode::Strict {
            for role in [StreamRole::Text, StreamRole::Context] {
                if let Some(rows) = layout.range(role) {
                    for i in rows {
                        for j in cols.clone() {
                            bias.set(i, j, BiasEntry::Blocked);
                        }
                    }
                }
            }
        }
        for i in cols.clone() {
            for j in (0..n).filter(|j| !cols.contains(j)) {
                bias.set(i, j, BiasEntry::Blocked);
            }
        }
    }
    Ok(bias)
}

/// Row-softmax of `Q·Kᵀ/√d_k + B`. Blocked entries get weight exactly `0`;
/// the max is taken over unblocked entries only.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, bias: &BiasMatrix) -> Result<Array2<f64>> {
    let (l, d) = q.dim();
    if k.dim() != (l, d) {
        return Err(shape_mismatch((l, d), k.dim()));
    }
    if bias.len() != l {
        return Err(shape_mismatch(l, bias.len()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Array2::<f64>::zeros((l, l));
    for i in 0..l {
        let qi = q.row(i);
        let mut row = weights.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for j in 0..l {
            if let BiasEntry::Value(b) = bias.get(i, j) {
                let s = qi.dot(&k.row(j)) * scale + b;
                row[j] = s;
                max = max.max(s);
                any = true;
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..l {
            if bias.is_blocked(i, j) {
                row[j] = 0.0;
            } else {
                let e = (row[j] - max).exp();
                row[j] = e;
                sum += e;
            }
        }
        row.mapv_inplace(|w| w / sum);
    }
    Ok(weights)
}

/// `weights · V`, skipping zero-weight blocked columns.
pub fn apply_weights(weights: ArrayView2<f64>, v: ArrayView2<f64>, bias: &BiasMatrix) -> Array2<f64> {
    let (l, d) = v.dim();
    let mut out = Array2::<f64>::zeros((weights.nrows(), d));
    for i in 0..weights.nrows() {
        let mut oi = out.row_mut(i);
        for j in 0..l {
            if !bias.is_blocked(i, j) {
                oi.scaled_add(weights[[i, j]], &v.row(j));
            }
        }
    }
    out
}

/// Single-head biased attention: `Softmax(Q·Kᵀ/√d + B)·V`.
pub fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, bias: &BiasMatrix) -> Result<Array2<f64>> {
    if v.nrows() != q.nrows() {
        return Err(shape_mismatch(q.nrows(), v.nrows()));
    }
    let w = attention_weights(q.view(), k.view(), bias)?;
    Ok(apply_weights(w.view(), v.view(), bias))
}

/// Splits the feature dimension into `heads` equal slices, attends each with
/// the same bias (`d_k = d / heads`) and concatenates the results.
pub fn multi_head_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    bias: &BiasMatrix,
    heads: usize,
) -> Result<Array2<f64>> {
    let d = q.ncols();
    if heads == 0 || d % heads != 0 {
        return Err(invalid(format!("{heads} heads do not evenly split dimension {d}")));
    }
    if k.dim() != q.dim() || v.dim() != q.dim() {
        return Err(shape_mismatch(q.dim(), (k.dim(), v.dim())));
    }
    let dh = d / heads;
    let mut out = Array2::<f64>::zeros(q.dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let w = attention_weights(q.slice(cols), k.slice(cols), bias)?;
        let o = apply_weights(w.view(), v.slice(cols), bias);
        out.slice_mut(cols).assign(&o);
    }
    Ok(out)
}

/// Full modulated attention over a set of streams: projection (LoRA branch
/// for cues), concatenation, bias construction and multi-head attention.
pub struct ModulatedAttention<'a> {
    pub weights: &'a ProjectionWeights,
    pub loras: &'a BTreeMap<CueId, LoraAdapter>,
    pub heads: usize,
    pub mode: ZeroStrengthMode,
}

impl ModulatedAttention<'_> {
    pub fn concat_qkv(&self, streams: &[TokenStream]) -> Result<(StreamLayout, Qkv)> {
        let layout = StreamLayout::from_streams(streams)?;
        let mut parts = Vec::with_capacity(streams.len());
        for s in streams {
            let qkv = match s.role() {
                StreamRole::Cue(id) => {
                    let lora = self
                        .loras
                        .get(&id)
                        .ok_or_else(|| invalid(format!("no LoRA adapter for {id}")))?;
                    project_qkv_cue(s, self.weights, lora)?
                }
                _ => project_qkv(s, self.weights)?,
            };
            parts.push(qkv);
        }
        let cat = |f: fn(&Qkv) -> &Array2<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        let qkv = Qkv { q: cat(|p| &p.q), k: cat(|p| &p.k), v: cat(|p| &p.v) };
        Ok((layout, qkv))
    }

    pub fn forward(&self, streams: &[TokenStream], spec: &ModulationSpec) -> Result<(StreamLayout, Array2<f64>)> {
        let (layout, qkv) = self.concat_qkv(streams)?;
        let bias = build_bias(&layout, spec, self.mode)?;
        let out = multi_head_attention(&qkv.q, &qkv.k, &qkv.v, &bias, self.heads)?;
        Ok((layout, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Triple-loop `W·z` per row, independent of ndarray's `dot`.
    fn naive_rowwise(z: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
        let (n, d_in) = z.dim();
        let d_out = w.nrows();
        let mut out = Array2::zeros((n, d_out));
        for i in 0..n {
            for o in 0..d_out {
                let mut acc = 0.0;
                for k in 0..d_in {
                    acc += w[[o, k]] * z[[i, k]];
                }
                out[[i, o]] = acc;
            }
        }
        out
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn remap_examples() {
        let p = remap_positions(512, 512, 1024, 1024).unwrap();
        assert_eq!(p[10 * 512 + 3], (20.0, 6.0));
        let id = remap_positions(7, 5, 7, 5).unwrap();
        assert_eq!(id[3 * 5 + 4], (3.0, 4.0));
        let p = remap_positions(3, 3, 10, 10).unwrap();
        let (pi, pj) = p[2 * 3 + 1];
        assert!((pi - 20.0 / 3.0).abs() < 1e-15);
        assert!((pj - 10.0 / 3.0).abs() < 1e-15);
        assert!(remap_positions(0, 3, 10, 10).is_err());
        assert!(remap_positions(11, 3, 10, 10).is_err());
    }

    #[test]
    fn remap_corners() {
        let p = remap_positions(6, 4, 13, 9).unwrap();
        assert_eq!(p[0], (0.0, 0.0));
        assert_eq!(*p.last().unwrap(), (65.0 / 6.0, 27.0 / 4.0));
    }

    #[test]
    fn project_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = rand_mat(&mut rng, 4, 8);
        let s = TokenStream::new(StreamRole::NoisyImage, z.clone(), None).unwrap();
        let out = project_qkv(&s, &ProjectionWeights::identity(8)).unwrap();
        assert_eq!(out.q, z);
        let zero = TokenStream::new(StreamRole::Context, Array2::zeros((4, 8)), None).unwrap();
        let w = ProjectionWeights::new(rand_mat(&mut rng, 8, 8), rand_mat(&mut rng, 8, 8), rand_mat(&mut rng, 8, 8)).unwrap();
        let out = project_qkv(&zero, &w).unwrap();
        assert!(out.q.iter().chain(out.k.iter()).chain(out.v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn project_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_mat(&mut rng, 4, 8);
        let w = ProjectionWeights::new(rand_mat(&mut rng, 8, 8), rand_mat(&mut rng, 8, 8), rand_mat(&mut rng, 8, 8)).unwrap();
        let s = TokenStream::new(StreamRole::NoisyImage, z.clone(), None).unwrap();
        let out = project_qkv(&s, &w).unwrap();
        assert!(max_diff(&out.q, &naive_rowwise(&z, &w.q)) < 1e-12);
        assert!(max_diff(&out.k, &naive_rowwise(&z, &w.k)) < 1e-12);
        assert!(max_diff(&out.v, &naive_rowwise(&z, &w.v)) < 1e-12);
    }

    #[test]
    fn lora_branch_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let z = rand_mat(&mut rng, 5, d);
        let w = ProjectionWeights::new(rand_mat(&mut rng, d, d), rand_mat(&mut rng, d, d), rand_mat(&mut rng, d, d)).unwrap();
        let cue = TokenStream::new(StreamRole::Cue(CueId(0)), z.clone(), None).unwrap();
        let plain = TokenStream::new(StreamRole::NoisyImage, z.clone(), None).unwrap();

        // zero B: identical to the shared projection
        let mut lora = LoraAdapter::zeros(d, 2);
        lora.a_q = rand_mat(&mut rng, 2, d);
        let a = project_qkv_cue(&cue, &w, &lora).unwrap();
        let b = project_qkv(&plain, &w).unwrap();
        assert_eq!(a, b);

        // zero W with B·A = I: pure adapter path returns the input
        let zero_w = ProjectionWeights::new(Array2::zeros((d, d)), Array2::zeros((d, d)), Array2::zeros((d, d))).unwrap();
        let mut full = LoraAdapter::zeros(d, d);
        full.a_q = Array2::eye(d);
        full.b_q = Array2::eye(d);
        let out = project_qkv_cue(&cue, &zero_w, &full).unwrap();
        assert!(max_diff(&out.q, &z) < 1e-15);

        // random rank 2 against the composition oracle
        let r = 2;
        let lora = LoraAdapter {
            a_q: rand_mat(&mut rng, r, d),
            a_k: rand_mat(&mut rng, r, d),
            a_v: rand_mat(&mut rng, r, d),
            b_q: rand_mat(&mut rng, d, r),
            b_k: rand_mat(&mut rng, d, r),
            b_v: rand_mat(&mut rng, d, r),
        };
        let out = project_qkv_cue(&cue, &w, &lora).unwrap();
        let oracle = |wm: &Array2<f64>, am: &Array2<f64>, bm: &Array2<f64>| {
            naive_rowwise(&z, wm) + naive_rowwise(&naive_rowwise(&z, am), bm)
        };
        assert!(max_diff(&out.q, &oracle(&w.q, &lora.a_q, &lora.b_q)) < 1e-12);
        assert!(max_diff(&out.k, &oracle(&w.k, &lora.a_k, &lora.b_k)) < 1e-12);
        assert!(max_diff(&out.v, &oracle(&w.v, &lora.a_v, &lora.b_v)) < 1e-12);
    }

    #[test]
    fn lora_rank_mismatch_rejected() {
        let d = 8;
        let mut lora = LoraAdapter::zeros(d, 2);
        lora.b_k = Array2::zeros((d, 3));
        let cue = TokenStream::new(StreamRole::Cue(CueId(1)), Array2::zeros((2, d)), None).unwrap();
        let err = project_qkv_cue(&cue, &ProjectionWeights::identity(d), &lora).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let plain = TokenStream::new(StreamRole::Text, Array2::zeros((2, d)), None).unwrap();
        assert!(project_qkv_cue(&plain, &ProjectionWeights::identity(d), &LoraAdapter::zeros(d, 2)).is_err());
        assert!(project_qkv(&cue, &ProjectionWeights::identity(d)).is_err());
    }

    #[test]
    fn layout_order_is_enforced() {
        use StreamRole::*;
        assert!(StreamLayout::new(&[(Text, 2), (NoisyImage, 3), (Cue(CueId(0)), 1), (Cue(CueId(1)), 1)]).is_ok());
        assert!(StreamLayout::new(&[(NoisyImage, 3), (Text, 2)]).is_err());
        assert!(StreamLayout::new(&[(NoisyImage, 3), (Cue(CueId(0)), 1), (Cue(CueId(0)), 1)]).is_err());
        assert!(StreamLayout::new(&[(NoisyImage, 3), (NoisyImage, 1)]).is_err());
        assert!(StreamLayout::new(&[(NoisyImage, 0)]).is_err());
    }

    fn small_layout() -> StreamLayout {
        use StreamRole::*;
        StreamLayout::new(&[(Text, 2), (NoisyImage, 3), (Context, 2), (Cue(CueId(0)), 2), (Cue(CueId(1)), 1)]).unwrap()
    }

    #[test]
    fn bias_values() {
        let layout = small_layout();
        let spec = ModulationSpec::new().with(CueId(0), 1.0).with(CueId(1), 2.0);
        let b = build_bias(&layout, &spec, ZeroStrengthMode::Verbatim).unwrap();
        for i in 2..5 {
            for j in 7..9 {
                assert_eq!(b.get(i, j), BiasEntry::Value(0.0));
            }
            assert_eq!(b.get(i, 9), BiasEntry::Value(2f64.ln()));
        }
        assert!((2f64.ln() - 0.6931).abs() < 1e-4);
        // cue rows isolated
        for j in 0..10 {
            assert_eq!(b.is_blocked(7, j), !(7..9).contains(&j));
            assert_eq!(b.is_blocked(9, j), j != 9);
        }
        // text/context rows see cues unbiased
        assert_eq!(b.get(0, 8), BiasEntry::Value(0.0));

        let spec0 = ModulationSpec::new().with(CueId(0), 0.0).with(CueId(1), 1.0);
        let b0 = build_bias(&layout, &spec0, ZeroStrengthMode::Verbatim).unwrap();
        assert!(b0.is_blocked(3, 7));
        assert!(!b0.is_blocked(0, 7));
        let strict = build_bias(&layout, &spec0, ZeroStrengthMode::Strict).unwrap();
        assert!(strict.is_blocked(0, 7) && strict.is_blocked(5, 8));
        assert!(!strict.is_blocked(0, 9));
    }

    #[test]
    fn bias_errors() {
        let layout = small_layout();
        let missing = ModulationSpec::new().with(CueId(0), 1.0);
        assert!(build_bias(&layout, &missing, ZeroStrengthMode::Verbatim).is_err());
        let negative = ModulationSpec::new().with(CueId(0), -0.5).with(CueId(1), 1.0);
        assert!(build_bias(&layout, &negative, ZeroStrengthMode::Verbatim).is_err());
    }

    #[test]
    fn singleton_attention_returns_value_row() {
        let q = Array2::from_shape_vec((1, 3), vec![0.3, -1.0, 2.0]).unwrap();
        let v = Array2::from_shape_vec((1, 3), vec![5.0, 6.0, 7.0]).unwrap();
        let out = attention(&q, &q, &v, &BiasMatrix::zeros(1)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn degenerate_row_detected() {
        let mut b = BiasMatrix::zeros(2);
        b.set(1, 0, BiasEntry::Blocked);
        b.set(1, 1, BiasEntry::Blocked);
        let m = Array2::zeros((2, 2));
        assert!(matches!(attention(&m, &m, &m, &b), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn zero_strength_equals_deleted_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = small_layout();
        let (q, k, v) = (rand_mat(&mut rng, 10, 4), rand_mat(&mut rng, 10, 4), rand_mat(&mut rng, 10, 4));
        let spec = ModulationSpec::new().with(CueId(0), 0.0).with(CueId(1), 1.5);
        let full = attention(&q, &k, &v, &build_bias(&layout, &spec, ZeroStrengthMode::Verbatim).unwrap()).unwrap();

        let keep: Vec<usize> = (0..10).filter(|j| !(7..9).contains(j)).collect();
        let take = |m: &Array2<f64>| m.select(Axis(0), &keep);
        let reduced_layout = layout.without_cue(CueId(0)).unwrap();
        let reduced_spec = ModulationSpec::new().with(CueId(1), 1.5);
        let reduced = attention(
            &take(&q),
            &take(&k),
            &take(&v),
            &build_bias(&reduced_layout, &reduced_spec, ZeroStrengthMode::Verbatim).unwrap(),
        )
        .unwrap();
        for (ri, fi) in (2..5).enumerate() {
            for c in 0..4 {
                assert!((full[[fi, c]] - reduced[[ri + 2, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn guidance_mass_increases_with_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout = small_layout();
        let (q, k) = (rand_mat(&mut rng, 10, 4), rand_mat(&mut rng, 10, 4));
        let mut prev = vec![-1.0; 3];
        for sigma in [1.0, 1.5, 2.0, 3.0, 4.0] {
            let spec = ModulationSpec::new().with(CueId(0), sigma).with(CueId(1), 1.0);
            let w = attention_weights(q.view(), k.view(), &build_bias(&layout, &spec, ZeroStrengthMode::Verbatim).unwrap()).unwrap();
            for (n, i) in (2..5).enumerate() {
                let mass: f64 = (7..9).map(|j| w[[i, j]]).sum();
                assert!(mass > prev[n]);
                prev[n] = mass;
            }
        }
    }

    #[test]
    fn multi_head_with_one_head_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (rand_mat(&mut rng, 6, 4), rand_mat(&mut rng, 6, 4), rand_mat(&mut rng, 6, 4));
        let b = BiasMatrix::zeros(6);
        assert_eq!(multi_head_attention(&q, &k, &v, &b, 1).unwrap(), attention(&q, &k, &v, &b).unwrap());
        assert!(multi_head_attention(&q, &k, &v, &b, 3).is_err());
    }

    #[test]
    fn modulated_pipeline_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let streams = vec![
            TokenStream::new(StreamRole::Text, rand_mat(&mut rng, 2, d), None).unwrap(),
            TokenStream::new(StreamRole::NoisyImage, rand_mat(&mut rng, 4, d), Some(remap_positions(2, 2, 2, 2).unwrap())).unwrap(),
            TokenStream::new(StreamRole::Cue(CueId(0)), rand_mat(&mut rng, 1, d), Some(vec![(0.0, 0.0)])).unwrap(),
        ];
        let mut loras = BTreeMap::new();
        loras.insert(CueId(0), LoraAdapter::zeros(d, 2));
        let w = ProjectionWeights::identity(d);
        let att = ModulatedAttention { weights: &w, loras: &loras, heads: 2, mode: ZeroStrengthMode::Verbatim };
        let (layout, out) = att.forward(&streams, &ModulationSpec::new().with(CueId(0), 1.0)).unwrap();
        assert_eq!(layout.len(), 7);
        assert_eq!(out.dim(), (7, d));
        // an isolated single-token cue attends only to itself
        let (_, qkv) = att.concat_qkv(&streams).unwrap();
        for c in 0..d {
            assert!((out[[6, c]] - qkv.v[[6, c]]).abs() < 1e-15);
        }
    }
}
