//! Pre-norm decoder-only transformer with per-head capture and edit hooks.
//!
//! Rows of every activation matrix are the concatenated token positions of
//! all sequences in a batch; linear layers run as one matrix product over
//! those rows and attention runs per sequence.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation_store::{ActivationRecord, Dims, Role};
use crate::error::{Error, Result};
use crate::offset_estimator::OffsetEstimator;
use crate::steering::{apply_edit_in_place, EditMode, EditPlan, SteeringField};

const NORM_EPS: f32 = 1e-5;
const CHECKPOINT_MAGIC: [u8; 4] = *b"TOYM";

/// Which prompt positions a captured head vector summarizes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    LastToken,
    MeanTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
    /// Position of the last prompt token; prompts are left-aligned to it
    /// so every prompt ends at the same position. `None` starts at 0.
    pub prompt_anchor: Option<usize>,
    pub seed: u64,
    pub bias_strength: f64,
    pub mlp_width: usize,
    pub pooling: Pooling,
    /// Tokens embedded as the sum of two table rows.
    pub composed: Vec<ComposedToken>,
}

/// `embed(token) = E[base] + E[modality]`; the token's own row is unused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedToken {
    pub token: u32,
    pub base: u32,
    pub modality: u32,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            layers: 4,
            heads: 8,
            head_dim: 16,
            vocab: 128,
            max_seq: 112,
            prompt_anchor: Some(47),
            seed: 0,
            bias_strength: 0.9,
            mlp_width: 128,
            pooling: Pooling::LastToken,
            composed: Vec::new(),
        }
    }
}

impl ToyModelConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn dims(&self) -> Dims {
        Dims {
            layers: self.layers,
            heads: self.heads,
            dim: self.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        Dims::new(self.layers, self.heads, self.head_dim)?;
        if self.vocab == 0 || self.max_seq == 0 || self.mlp_width == 0 {
            return Err(Error::InvalidArgument("vocab, max_seq and mlp_width must be at least 1".into()));
        }
        if self.prompt_anchor.is_some_and(|a| a >= self.max_seq) {
            return Err(Error::InvalidArgument("prompt_anchor must be below max_seq".into()));
        }
        if let Some(c) = self
            .composed
            .iter()
            .find(|c| [c.token, c.base, c.modality].iter().any(|&t| t as usize >= self.vocab))
        {
            return Err(Error::InvalidArgument(format!("composed token {c:?} outside vocabulary")));
        }
        if !(0.0..=1.0).contains(&self.bias_strength) {
            return Err(Error::InvalidArgument(format!(
                "bias_strength must lie in [0, 1], got {}",
                self.bias_strength
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    norm1: Range<usize>,
    wq: Range<usize>,
    wk: Range<usize>,
    wv: Range<usize>,
    wo: Range<usize>,
    norm2: Range<usize>,
    w1: Range<usize>,
    w2: Range<usize>,
}

/// Tensor offsets in declaration order.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok_emb: Range<usize>,
    pos_emb: Range<usize>,
    layers: Vec<LayerLayout>,
    norm_f: Range<usize>,
    unembed: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(cfg: &ToyModelConfig) -> Layout {
        let d = cfg.width();
        let m = cfg.mlp_width;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let tok_emb = take(cfg.vocab * d);
        let pos_emb = take(cfg.max_seq * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerLayout {
                norm1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                norm2: take(d),
                w1: take(d * m),
                w2: take(m * d),
            })
            .collect();
        let norm_f = take(d);
        let unembed = take(d * cfg.vocab);
        Layout {
            tok_emb,
            pos_emb,
            layers,
            norm_f,
            unembed,
            total: at,
        }
    }
}

/// Named parameter tensors for direct access.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensor {
    TokenEmbedding,
    PositionEmbedding,
    Norm1(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    /// `width x width`; rows `h*D..(h+1)*D` read head `h`.
    Wo(usize),
    Norm2(usize),
    W1(usize),
    W2(usize),
    FinalNorm,
    Unembedding,
}

/// Per-head output captured at the pooling position of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedHead {
    pub layer: usize,
    pub head: usize,
    pub vector: Vec<f32>,
}

/// Steering applied inside the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EditHook<'a> {
    pub field: &'a SteeringField,
    pub plan: &'a EditPlan,
    pub estimator: Option<&'a OffsetEstimator>,
}

#[derive(Debug, Clone, Default)]
pub struct Hook<'a> {
    pub capture: Vec<(usize, usize)>,
    pub pooling: Pooling,
    pub edit: Option<EditHook<'a>>,
}

impl<'a> Hook<'a> {
    pub fn capture_all(dims: Dims, pooling: Pooling) -> Hook<'a> {
        Hook {
            capture: (0..dims.layers)
                .flat_map(|l| (0..dims.heads).map(move |k| (l, k)))
                .collect(),
            pooling,
            edit: None,
        }
    }

    pub fn editing(edit: EditHook<'a>) -> Hook<'a> {
        Hook {
            capture: Vec::new(),
            pooling: Pooling::LastToken,
            edit: Some(edit),
        }
    }

    fn validate(&self, dims: Dims) -> Result<()> {
        for &(l, k) in &self.capture {
            if l >= dims.layers || k >= dims.heads {
                return Err(Error::DimMismatch(format!(
                    "capture cell ({l}, {k}) outside L={} H={}",
                    dims.layers, dims.heads
                )));
            }
        }
        if let Some(e) = &self.edit {
            if e.field.dims != dims {
                return Err(Error::DimMismatch(format!(
                    "field dims {:?} differ from model dims {dims:?}",
                    e.field.dims
                )));
            }
            e.plan.validate(dims)?;
            if e.plan.mode == EditMode::FasPlusQao {
                let est = e.estimator.ok_or(Error::MissingEstimator)?;
                if let Some(&(l, k)) = e.plan.selected.iter().find(|c| est.head(**c).is_none()) {
                    return Err(Error::UncoveredHead { layer: l, head: k });
                }
            }
        }
        Ok(())
    }
}

/// One input sequence; edits apply at positions `>= prompt_len - 1` and
/// the pooling position is derived from `prompt_len`.
#[derive(Debug, Clone, Copy)]
pub struct Sequence<'a> {
    pub tokens: &'a [u32],
    pub prompt_len: usize,
}

impl<'a> Sequence<'a> {
    pub fn prompt(tokens: &'a [u32]) -> Sequence<'a> {
        Sequence {
            tokens,
            prompt_len: tokens.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Row-major `rows x vocab`.
    pub logits: Vec<f32>,
    pub vocab: usize,
    /// Captures per sequence, in hook order.
    pub captures: Vec<Vec<CapturedHead>>,
}

impl ForwardOutput {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn rows(&self) -> usize {
        self.logits.len() / self.vocab.max(1)
    }

    /// Capture of sequence `seq` as container records.
    pub fn records(&self, seq: usize, sample_id: u64, role: Role) -> Vec<ActivationRecord> {
        self.captures[seq]
            .iter()
            .map(|c| ActivationRecord {
                sample_id,
                role,
                layer: c.layer,
                head: c.head,
                vector: c.vector.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    layout: Layout,
    params: Vec<f32>,
    /// Embedding rows summed for each token id.
    sources: Vec<(u32, Option<u32>)>,
}

// ---------------------------------------------------------------------------
// Dense kernels (row-major, single-threaded).

/// `c = a b + beta c`, `a: m x k`, `b: k x n`.
fn mm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += a^T b`, `a: k x m`, `b: k x n`.
fn mm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `a` is read transposed through its strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a b^T + beta c`, `a: m x k`, `b: n x k`.
fn mm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], beta: f32) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `b` is read transposed through its strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// RMS-normalizes each row into `out`, returning per-row inverse RMS.
fn rms_norm(x: &[f32], g: &[f32], d: usize, out: &mut [f32]) -> Vec<f32> {
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        for ((o, &v), &gi) in o.iter_mut().zip(row).zip(g) {
            *o = v * r * gi;
        }
        inv.push(r);
    }
    inv
}

/// Accumulates `dx` and `dg` for `n = g * x * r`.
fn rms_norm_back(x: &[f32], g: &[f32], inv: &[f32], dn: &[f32], d: usize, dx: &mut [f32], dg: &mut [f32]) {
    for (((row, &r), dnr), dxr) in x
        .chunks_exact(d)
        .zip(inv)
        .zip(dn.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
    {
        let mut dot = 0.0f32;
        for c in 0..d {
            let gd = g[c] * dnr[c];
            dot += gd * row[c];
            dg[c] += dnr[c] * row[c] * r;
        }
        let k = r * r * r * dot / d as f32;
        for c in 0..d {
            dxr[c] += r * g[c] * dnr[c] - row[c] * k;
        }
    }
}

struct LayerCache {
    x: Vec<f32>,
    inv1: Vec<f32>,
    n1: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Attention weights per (sequence, head), `T x T` each.
    p: Vec<f32>,
    z: Vec<f32>,
    x2: Vec<f32>,
    inv2: Vec<f32>,
    n2: Vec<f32>,
    hpre: Vec<f32>,
    hact: Vec<f32>,
}

/// Activations kept for the backward pass.
pub struct Cache {
    offsets: Vec<usize>,
    starts: Vec<usize>,
    /// Per `(layer, sequence, head)` multiplier on `z`; empty for none.
    head_mask: Vec<f32>,
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f32>,
    inv_f: Vec<f32>,
    n_final: Vec<f32>,
}

fn p_offsets(offsets: &[usize], heads: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(offsets.len());
    let mut at = 0;
    for w in offsets.windows(2) {
        out.push(at);
        let t = w[1] - w[0];
        at += heads * t * t;
    }
    out.push(at);
    out
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<ToyModel> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0f32; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.width();
        let depth_scale = 1.0 / (2.0 * config.layers as f32).sqrt();
        let mut fill = |r: &Range<usize>, std: f32, rng: &mut ChaCha8Rng| {
            let a = std * 3f32.sqrt();
            for p in &mut params[r.clone()] {
                *p = rng.gen_range(-a..a);
            }
        };
        fill(&layout.tok_emb, 0.5, &mut rng);
        fill(&layout.pos_emb, 0.1, &mut rng);
        let inv_d = 1.0 / (d as f32).sqrt();
        let inv_m = 1.0 / (config.mlp_width as f32).sqrt();
        for l in &layout.layers {
            fill(&l.wq, inv_d, &mut rng);
            fill(&l.wk, inv_d, &mut rng);
            fill(&l.wv, inv_d, &mut rng);
            fill(&l.wo, inv_d * depth_scale, &mut rng);
            fill(&l.w1, inv_d, &mut rng);
            fill(&l.w2, inv_m * depth_scale, &mut rng);
        }
        fill(&layout.unembed, inv_d, &mut rng);
        for l in &layout.layers {
            params[l.norm1.clone()].fill(1.0);
            params[l.norm2.clone()].fill(1.0);
        }
        params[layout.norm_f.clone()].fill(1.0);
        let mut sources: Vec<(u32, Option<u32>)> = (0..config.vocab as u32).map(|t| (t, None)).collect();
        for c in &config.composed {
            sources[c.token as usize] = (c.base, Some(c.modality));
        }
        Ok(ToyModel {
            config,
            layout,
            params,
            sources,
        })
    }

    pub fn dims(&self) -> Dims {
        self.config.dims()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    fn range(&self, t: Tensor) -> Range<usize> {
        let l = &self.layout;
        match t {
            Tensor::TokenEmbedding => l.tok_emb.clone(),
            Tensor::PositionEmbedding => l.pos_emb.clone(),
            Tensor::Norm1(i) => l.layers[i].norm1.clone(),
            Tensor::Wq(i) => l.layers[i].wq.clone(),
            Tensor::Wk(i) => l.layers[i].wk.clone(),
            Tensor::Wv(i) => l.layers[i].wv.clone(),
            Tensor::Wo(i) => l.layers[i].wo.clone(),
            Tensor::Norm2(i) => l.layers[i].norm2.clone(),
            Tensor::W1(i) => l.layers[i].w1.clone(),
            Tensor::W2(i) => l.layers[i].w2.clone(),
            Tensor::FinalNorm => l.norm_f.clone(),
            Tensor::Unembedding => l.unembed.clone(),
        }
    }

    pub fn tensor(&self, t: Tensor) -> &[f32] {
        &self.params[self.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f32] {
        let r = self.range(t);
        &mut self.params[r]
    }

    /// Position of the first token of a sequence whose prompt has
    /// `prompt_len` tokens, or `None` when it cannot be placed.
    pub fn start_position(&self, prompt_len: usize) -> Option<usize> {
        match self.config.prompt_anchor {
            Some(a) => (a + 1).checked_sub(prompt_len),
            None => Some(0),
        }
    }

    /// Whether a sequence of `len` tokens with this prompt fits the positions.
    pub fn fits(&self, prompt_len: usize, len: usize) -> bool {
        self.start_position(prompt_len)
            .is_some_and(|s| s + len <= self.config.max_seq)
    }

    fn check_sequences(&self, seqs: &[Sequence<'_>]) -> Result<()> {
        for s in seqs {
            if !self.fits(s.prompt_len, s.tokens.len()) {
                let limit = match self.config.prompt_anchor {
                    Some(a) if s.prompt_len > a + 1 => a + 1,
                    _ => self.config.max_seq - self.start_position(s.prompt_len).unwrap_or(0),
                };
                return Err(Error::SeqTooLong {
                    len: s.tokens.len(),
                    max: limit,
                });
            }
            if s.tokens.is_empty() || s.prompt_len == 0 || s.prompt_len > s.tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "sequence of {} tokens with prompt length {}",
                    s.tokens.len(),
                    s.prompt_len
                )));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
                return Err(Error::InvalidArgument(format!(
                    "token id {t} outside vocabulary of {}",
                    self.config.vocab
                )));
            }
        }
        Ok(())
    }

    /// Runs the blocks; returns the final normalized hidden rows.
    fn run(&self, seqs: &[Sequence<'_>], hook: Option<&Hook<'_>>, mut cache: Option<&mut Cache>) -> Result<(Vec<f32>, Vec<Vec<CapturedHead>>)> {
        self.check_sequences(seqs)?;
        if let Some(h) = hook {
            h.validate(self.dims())?;
        }
        let cfg = &self.config;
        let (d, hd, nh, mw) = (cfg.width(), cfg.head_dim, cfg.heads, cfg.mlp_width);
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        offsets.push(0);
        for s in seqs {
            offsets.push(offsets.last().unwrap() + s.tokens.len());
        }
        let n = *offsets.last().unwrap();
        let p = &self.params;

        let mut x = vec![0f32; n * d];
        let tok = &p[self.layout.tok_emb.clone()];
        let pos = &p[self.layout.pos_emb.clone()];
        let starts: Vec<usize> = seqs
            .iter()
            .map(|s| self.start_position(s.prompt_len).expect("checked above"))
            .collect();
        for (s, seq) in seqs.iter().enumerate() {
            for (t, &id) in seq.tokens.iter().enumerate() {
                let t_pos = starts[s] + t;
                let row = &mut x[(offsets[s] + t) * d..(offsets[s] + t + 1) * d];
                let (base, modality) = self.sources[id as usize];
                let e = &tok[base as usize * d..(base as usize + 1) * d];
                let pe = &pos[t_pos * d..(t_pos + 1) * d];
                for ((r, a), b) in row.iter_mut().zip(e).zip(pe) {
                    *r = a + b;
                }
                if let Some(m) = modality {
                    for (r, a) in row.iter_mut().zip(&tok[m as usize * d..(m as usize + 1) * d]) {
                        *r += a;
                    }
                }
            }
        }

        let mut captures: Vec<Vec<CapturedHead>> = vec![Vec::new(); seqs.len()];
        let scale = 1.0 / (hd as f32).sqrt();
        let poffs = p_offsets(&offsets, nh);
        if let Some(c) = cache.as_deref_mut() {
            c.offsets = offsets.clone();
            c.starts = starts.clone();
            c.tokens = seqs.iter().flat_map(|s| s.tokens.iter().copied()).collect();
            c.layers.clear();
        }

        for (li, lay) in self.layout.layers.iter().enumerate() {
            let mut n1 = vec![0f32; n * d];
            let inv1 = rms_norm(&x, &p[lay.norm1.clone()], d, &mut n1);
            let mut q = vec![0f32; n * d];
            let mut k = vec![0f32; n * d];
            let mut v = vec![0f32; n * d];
            mm(n, d, d, &n1, &p[lay.wq.clone()], &mut q, 0.0);
            mm(n, d, d, &n1, &p[lay.wk.clone()], &mut k, 0.0);
            mm(n, d, d, &n1, &p[lay.wv.clone()], &mut v, 0.0);

            let keep_p = cache.is_some();
            let mut pbuf = if keep_p { vec![0f32; poffs[seqs.len()]] } else { Vec::new() };
            let mut z = vec![0f32; n * d];
            let mut scores = vec![0f32; cfg.max_seq];
            for s in 0..seqs.len() {
                let (o, t_len) = (offsets[s], offsets[s + 1] - offsets[s]);
                for h in 0..nh {
                    let c0 = h * hd;
                    for i in 0..t_len {
                        let qi = &q[(o + i) * d + c0..(o + i) * d + c0 + hd];
                        let mut max = f32::NEG_INFINITY;
                        for j in 0..=i {
                            let kj = &k[(o + j) * d + c0..(o + j) * d + c0 + hd];
                            let sc = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                            scores[j] = sc;
                            max = max.max(sc);
                        }
                        let mut sum = 0.0;
                        for sc in &mut scores[..=i] {
                            *sc = (*sc - max).exp();
                            sum += *sc;
                        }
                        let zi = (o + i) * d + c0;
                        for j in 0..=i {
                            let w = scores[j] / sum;
                            if keep_p {
                                pbuf[poffs[s] + h * t_len * t_len + i * t_len + j] = w;
                            }
                            let vj = &v[(o + j) * d + c0..(o + j) * d + c0 + hd];
                            for (zz, vv) in z[zi..zi + hd].iter_mut().zip(vj) {
                                *zz += w * vv;
                            }
                        }
                    }
                }
            }

            if let Some(c) = cache.as_deref() {
                if !c.head_mask.is_empty() {
                    for s in 0..seqs.len() {
                        for h in 0..nh {
                            let m = c.head_mask[(li * seqs.len() + s) * nh + h];
                            for r in offsets[s]..offsets[s + 1] {
                                z[r * d + h * hd..r * d + (h + 1) * hd].iter_mut().for_each(|v| *v *= m);
                            }
                        }
                    }
                }
            }

            if let Some(h) = hook {
                for (s, seq) in seqs.iter().enumerate() {
                    let o = offsets[s];
                    if let Some(e) = &h.edit {
                        for pos in seq.prompt_len - 1..seq.tokens.len() {
                            let row = (o + pos) * d;
                            for &(l, kk) in &e.plan.selected {
                                if l == li {
                                    apply_edit_in_place(
                                        &mut z[row + kk * hd..row + (kk + 1) * hd],
                                        (l, kk),
                                        e.field,
                                        e.plan,
                                        e.estimator,
                                    )?;
                                }
                            }
                        }
                    }
                    for &(l, kk) in h.capture.iter().filter(|c| c.0 == li) {
                        let vector = match h.pooling {
                            Pooling::LastToken => {
                                let row = (o + seq.prompt_len - 1) * d + kk * hd;
                                z[row..row + hd].to_vec()
                            }
                            Pooling::MeanTokens => {
                                let mut acc = vec![0f64; hd];
                                for pos in 0..seq.prompt_len {
                                    let row = (o + pos) * d + kk * hd;
                                    for (a, &zz) in acc.iter_mut().zip(&z[row..row + hd]) {
                                        *a += f64::from(zz);
                                    }
                                }
                                acc.iter().map(|a| (a / seq.prompt_len as f64) as f32).collect()
                            }
                        };
                        captures[s].push(CapturedHead {
                            layer: l,
                            head: kk,
                            vector,
                        });
                    }
                }
            }

            let mut x2 = x.clone();
            mm(n, d, d, &z, &p[lay.wo.clone()], &mut x2, 1.0);
            let mut n2 = vec![0f32; n * d];
            let inv2 = rms_norm(&x2, &p[lay.norm2.clone()], d, &mut n2);
            let mut hpre = vec![0f32; n * mw];
            mm(n, d, mw, &n2, &p[lay.w1.clone()], &mut hpre, 0.0);
            let hact: Vec<f32> = hpre.iter().map(|&h| h.max(0.0)).collect();
            let mut x3 = x2.clone();
            mm(n, mw, d, &hact, &p[lay.w2.clone()], &mut x3, 1.0);

            if let Some(c) = cache.as_deref_mut() {
                c.layers.push(LayerCache {
                    x: std::mem::take(&mut x),
                    inv1,
                    n1,
                    q,
                    k,
                    v,
                    p: pbuf,
                    z,
                    x2,
                    inv2,
                    n2,
                    hpre,
                    hact,
                });
            }
            x = x3;
        }
        let mut nf = vec![0f32; n * d];
        let inv_f = rms_norm(&x, &p[self.layout.norm_f.clone()], d, &mut nf);
        if let Some(c) = cache {
            c.x_final = x;
            c.inv_f = inv_f;
            c.n_final = nf.clone();
        }
        Ok((nf, captures))
    }

    fn unembed_rows(&self, nf: &[f32], rows: &[usize]) -> Vec<f32> {
        let d = self.config.width();
        let vsz = self.config.vocab;
        let mut gathered = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            gathered.extend_from_slice(&nf[r * d..(r + 1) * d]);
        }
        let mut logits = vec![0f32; rows.len() * vsz];
        mm(rows.len(), d, vsz, &gathered, &self.params[self.layout.unembed.clone()], &mut logits, 0.0);
        logits
    }

    /// Logits for the requested rows plus hook captures.
    pub fn forward(&self, seqs: &[Sequence<'_>], hook: Option<&Hook<'_>>, rows: LogitRows) -> Result<ForwardOutput> {
        let (nf, captures) = self.run(seqs, hook, None)?;
        let mut idx = Vec::new();
        let mut at = 0;
        for s in seqs {
            match rows {
                LogitRows::All => idx.extend(at..at + s.tokens.len()),
                LogitRows::Last => idx.push(at + s.tokens.len() - 1),
            }
            at += s.tokens.len();
        }
        Ok(ForwardOutput {
            logits: self.unembed_rows(&nf, &idx),
            vocab: self.config.vocab,
            captures,
        })
    }

    /// Mean cross-entropy over rows with a target and its gradient.
    /// `targets[r]` is the next-token target for concatenated row `r`.
    pub fn loss_and_grad(&self, seqs: &[Sequence<'_>], targets: &[Option<u32>], grad: &mut [f32]) -> Result<f64> {
        self.loss_and_grad_masked(seqs, targets, grad, &[])
    }

    /// As `loss_and_grad` with each head output scaled by
    /// `head_mask[(layer * seqs.len() + seq) * heads + head]` (empty: none).
    pub fn loss_and_grad_masked(
        &self,
        seqs: &[Sequence<'_>],
        targets: &[Option<u32>],
        grad: &mut [f32],
        head_mask: &[f32],
    ) -> Result<f64> {
        let cfg = &self.config;
        if !head_mask.is_empty() && head_mask.len() != cfg.layers * seqs.len() * cfg.heads {
            return Err(Error::DimMismatch(format!(
                "head mask of {} entries for {} layers x {} sequences x {} heads",
                head_mask.len(),
                cfg.layers,
                seqs.len(),
                cfg.heads
            )));
        }
        let mut cache = Cache {
            offsets: Vec::new(),
            starts: Vec::new(),
            head_mask: head_mask.to_vec(),
            tokens: Vec::new(),
            layers: Vec::new(),
            x_final: Vec::new(),
            inv_f: Vec::new(),
            n_final: Vec::new(),
        };
        self.run(seqs, None, Some(&mut cache))?;
        let n = *cache.offsets.last().unwrap();
        if targets.len() != n || grad.len() != self.params.len() {
            return Err(Error::DimMismatch(format!(
                "{} targets for {n} rows, {} gradient slots for {} parameters",
                targets.len(),
                grad.len(),
                self.params.len()
            )));
        }
        let rows: Vec<usize> = (0..n).filter(|&r| targets[r].is_some()).collect();
        if rows.is_empty() {
            return Ok(0.0);
        }
        let vsz = self.config.vocab;
        let mut logits = self.unembed_rows(&cache.n_final, &rows);
        let mut loss = 0.0f64;
        let norm = 1.0 / rows.len() as f32;
        for (i, &r) in rows.iter().enumerate() {
            let t = targets[r].unwrap() as usize;
            let row = &mut logits[i * vsz..(i + 1) * vsz];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            loss -= f64::from((row[t] / sum).max(1e-30).ln());
            for v in row.iter_mut() {
                *v = *v / sum * norm;
            }
            row[t] -= norm;
        }
        self.backward(&cache, &rows, &logits, grad);
        Ok(loss / rows.len() as f64)
    }

    fn backward(&self, c: &Cache, rows: &[usize], dlogits: &[f32], grad: &mut [f32]) {
        let cfg = &self.config;
        let (d, hd, nh, mw, vsz) = (cfg.width(), cfg.head_dim, cfg.heads, cfg.mlp_width, cfg.vocab);
        let n = *c.offsets.last().unwrap();
        let p = &self.params;
        let lay = &self.layout;

        let mut gathered = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            gathered.extend_from_slice(&c.n_final[r * d..(r + 1) * d]);
        }
        mm_tn(d, rows.len(), vsz, &gathered, dlogits, &mut grad[lay.unembed.clone()]);
        let mut dn_rows = vec![0f32; rows.len() * d];
        mm_nt(rows.len(), vsz, d, dlogits, &p[lay.unembed.clone()], &mut dn_rows, 0.0);
        let mut dnf = vec![0f32; n * d];
        for (i, &r) in rows.iter().enumerate() {
            dnf[r * d..(r + 1) * d].copy_from_slice(&dn_rows[i * d..(i + 1) * d]);
        }
        let mut dx = vec![0f32; n * d];
        {
            let (gf, dgf) = (&p[lay.norm_f.clone()], &mut grad[lay.norm_f.clone()]);
            rms_norm_back(&c.x_final, gf, &c.inv_f, &dnf, d, &mut dx, dgf);
        }

        let scale = 1.0 / (hd as f32).sqrt();
        let poffs = p_offsets(&c.offsets, nh);
        for (li, lc) in c.layers.iter().enumerate().rev() {
            let ll = &lay.layers[li];
            // MLP block: x3 = x2 + relu(n2 W1) W2.
            mm_tn(mw, n, d, &lc.hact, &dx, &mut grad[ll.w2.clone()]);
            let mut dh = vec![0f32; n * mw];
            mm_nt(n, d, mw, &dx, &p[ll.w2.clone()], &mut dh, 0.0);
            for (g, &h) in dh.iter_mut().zip(&lc.hpre) {
                if h <= 0.0 {
                    *g = 0.0;
                }
            }
            mm_tn(d, n, mw, &lc.n2, &dh, &mut grad[ll.w1.clone()]);
            let mut dn2 = vec![0f32; n * d];
            mm_nt(n, mw, d, &dh, &p[ll.w1.clone()], &mut dn2, 0.0);
            let mut dx2 = dx;
            rms_norm_back(&lc.x2, &p[ll.norm2.clone()], &lc.inv2, &dn2, d, &mut dx2, &mut grad[ll.norm2.clone()]);

            // Attention block: x2 = x + z Wo.
            mm_tn(d, n, d, &lc.z, &dx2, &mut grad[ll.wo.clone()]);
            let mut dz = vec![0f32; n * d];
            mm_nt(n, d, d, &dx2, &p[ll.wo.clone()], &mut dz, 0.0);
            if !c.head_mask.is_empty() {
                let seqs = c.offsets.len() - 1;
                for s in 0..seqs {
                    for h in 0..nh {
                        let m = c.head_mask[(li * seqs + s) * nh + h];
                        for r in c.offsets[s]..c.offsets[s + 1] {
                            dz[r * d + h * hd..r * d + (h + 1) * hd].iter_mut().for_each(|v| *v *= m);
                        }
                    }
                }
            }
            let mut dq = vec![0f32; n * d];
            let mut dk = vec![0f32; n * d];
            let mut dv = vec![0f32; n * d];
            let mut dp = vec![0f32; cfg.max_seq];
            for s in 0..c.offsets.len() - 1 {
                let (o, t_len) = (c.offsets[s], c.offsets[s + 1] - c.offsets[s]);
                for h in 0..nh {
                    let c0 = h * hd;
                    let pb = &lc.p[poffs[s] + h * t_len * t_len..poffs[s] + (h + 1) * t_len * t_len];
                    for i in 0..t_len {
                        let dzi = &dz[(o + i) * d + c0..(o + i) * d + c0 + hd];
                        let prow = &pb[i * t_len..i * t_len + i + 1];
                        let mut dot = 0.0f32;
                        for j in 0..=i {
                            let vj = &lc.v[(o + j) * d + c0..(o + j) * d + c0 + hd];
                            let g = dzi.iter().zip(vj).map(|(a, b)| a * b).sum::<f32>();
                            dp[j] = g;
                            dot += g * prow[j];
                        }
                        let qi = (o + i) * d + c0;
                        for j in 0..=i {
                            let w = prow[j];
                            let kj = (o + j) * d + c0;
                            for e in 0..hd {
                                dv[kj + e] += w * dzi[e];
                            }
                            let ds = w * (dp[j] - dot) * scale;
                            if ds != 0.0 {
                                for e in 0..hd {
                                    dq[qi + e] += ds * lc.k[kj + e];
                                    dk[kj + e] += ds * lc.q[qi + e];
                                }
                            }
                        }
                    }
                }
            }
            mm_tn(d, n, d, &lc.n1, &dq, &mut grad[ll.wq.clone()]);
            mm_tn(d, n, d, &lc.n1, &dk, &mut grad[ll.wk.clone()]);
            mm_tn(d, n, d, &lc.n1, &dv, &mut grad[ll.wv.clone()]);
            let mut dn1 = vec![0f32; n * d];
            mm_nt(n, d, d, &dq, &p[ll.wq.clone()], &mut dn1, 0.0);
            mm_nt(n, d, d, &dk, &p[ll.wk.clone()], &mut dn1, 1.0);
            mm_nt(n, d, d, &dv, &p[ll.wv.clone()], &mut dn1, 1.0);
            let mut dxl = dx2;
            rms_norm_back(&lc.x, &p[ll.norm1.clone()], &lc.inv1, &dn1, d, &mut dxl, &mut grad[ll.norm1.clone()]);
            dx = dxl;
        }

        let mut t = 0;
        for s in 0..c.offsets.len() - 1 {
            for pos in c.starts[s]..c.starts[s] + c.offsets[s + 1] - c.offsets[s] {
                let (base, modality) = self.sources[c.tokens[t] as usize];
                let g = &dx[t * d..(t + 1) * d];
                for row in std::iter::once(base).chain(modality) {
                    let r = lay.tok_emb.start + row as usize * d;
                    for (a, b) in grad[r..r + d].iter_mut().zip(g) {
                        *a += b;
                    }
                }
                for (a, b) in grad[lay.pos_emb.start + pos * d..lay.pos_emb.start + (pos + 1) * d]
                    .iter_mut()
                    .zip(g)
                {
                    *a += b;
                }
                t += 1;
            }
        }
    }

    /// Little-endian checkpoint: magic, config JSON, parameters in
    /// declaration order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(16 + cfg.len() + self.params.len() * 4);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<ToyModel> {
        let bad = |r: String| Error::malformed(origin, r);
        if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != 1 {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cfg_end = 12 + cfg_len;
        if bytes.len() < cfg_end + 8 {
            return Err(bad("truncated header".into()));
        }
        let config: ToyModelConfig =
            serde_json::from_slice(&bytes[12..cfg_end]).map_err(|e| bad(e.to_string()))?;
        let mut model = ToyModel::new(config).map_err(|e| bad(e.to_string()))?;
        let count = u64::from_le_bytes(bytes[cfg_end..cfg_end + 8].try_into().unwrap()) as usize;
        let body = &bytes[cfg_end + 8..];
        if count != model.params.len() || body.len() != count * 4 {
            return Err(bad(format!(
                "expected {} parameters, header says {count} and body holds {} bytes",
                model.params.len(),
                body.len()
            )));
        }
        for (p, b) in model.params.iter_mut().zip(body.chunks_exact(4)) {
            *p = f32::from_le_bytes(b.try_into().unwrap());
            if !p.is_finite() {
                return Err(bad("non-finite parameter".into()));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ToyModel> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ToyModel::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyModel {
        tiny_anchored(None)
    }

    fn tiny_anchored(prompt_anchor: Option<usize>) -> ToyModel {
        ToyModel::new(ToyModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 3,
            vocab: 7,
            max_seq: 8,
            prompt_anchor,
            seed: 3,
            mlp_width: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for anchor in [None, Some(5)] {
            check_gradient(tiny_anchored(anchor));
        }
    }

    fn check_gradient(mut model: ToyModel) {
        let a = [0u32, 3, 4, 1, 2];
        let b = [5u32, 6, 2];
        let seqs = [Sequence::prompt(&a), Sequence::prompt(&b)];
        let targets = vec![Some(3), None, Some(1), Some(2), None, Some(6), Some(2), Some(0)];
        let mut grad = vec![0f32; model.param_count()];
        model.loss_and_grad(&seqs, &targets, &mut grad).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst = 0f64;
        for _ in 0..60 {
            let i = rng.gen_range(0..model.param_count());
            let orig = model.params[i];
            let eps = 1e-2f32;
            let mut scratch = vec![0f32; model.param_count()];
            model.params[i] = orig + eps;
            let up = model.loss_and_grad(&seqs, &targets, &mut scratch).unwrap();
            model.params[i] = orig - eps;
            let down = model.loss_and_grad(&seqs, &targets, &mut scratch).unwrap();
            model.params[i] = orig;
            let numeric = (up - down) / (2.0 * f64::from(eps));
            let err = (numeric - f64::from(grad[i])).abs() / (numeric.abs() + f64::from(grad[i]).abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 2e-2, "worst relative gradient error {worst}");
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let model = tiny();
        let long = [0u32; 9];
        assert!(matches!(
            model.forward(&[Sequence::prompt(&long)], None, LogitRows::Last),
            Err(Error::SeqTooLong { len: 9, max: 8 })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = tiny();
        let bytes = model.to_bytes().unwrap();
        let back = ToyModel::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, model);
        assert!(ToyModel::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
    }

    #[test]
    fn batching_does_not_change_logits() {
        let model = tiny();
        let a = [0u32, 3, 4, 1];
        let b = [5u32, 6];
        let both = model
            .forward(&[Sequence::prompt(&a), Sequence::prompt(&b)], None, LogitRows::Last)
            .unwrap();
        let alone = model.forward(&[Sequence::prompt(&b)], None, LogitRows::Last).unwrap();
        for (x, y) in both.row(1).iter().zip(alone.row(0)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
