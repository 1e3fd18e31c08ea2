//! Frame-causal attention: token layout, mask construction, the sink-window
//! KV cache, the streaming transformer step, and the adaLN sink.
//!
//! Two routes compute the same function and are tested against each other:
//! `fca_step` runs one frame incrementally against the cache, while
//! `fca_full_forward` recomputes the whole sequence under a mask built by
//! `build_mask`. Both consult the same `permits` rule, so the only thing
//! that can differ is the numerics of incremental attention.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::collections::VecDeque;

use crate::config::{ModelConfig, COND_TOKENS};
use crate::error::{ModelError, Result};
use crate::numeric::{layer_norm_rows, linear, silu, softmax_masked, Real};
use crate::params::{BlockWeights, ModelWeights, NORM_EPS};

/// Kind of a token inside a frame's interleaved block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Audio,
    Intensity,
    Visual,
}

/// Per-frame token order: condition tokens (audio, intensity) followed by
/// the visual tokens. Identical for every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    pub cond_tokens: usize,
    pub visual_tokens: usize,
}

impl FrameLayout {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        FrameLayout {
            cond_tokens: COND_TOKENS,
            visual_tokens: cfg.spatial_tokens,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.cond_tokens + self.visual_tokens
    }

    /// Kind of the token at `offset` within a frame block.
    pub fn kind(&self, offset: usize) -> TokenKind {
        match offset {
            0 => TokenKind::Audio,
            1 => TokenKind::Intensity,
            _ => TokenKind::Visual,
        }
    }
}

/// Within-frame attention variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskVariant {
    /// Condition and visual tokens of a frame attend to each other freely.
    Full,
    /// The audio token never attends to visual tokens (any frame); visual
    /// tokens keep their attention onto audio.
    UniAtt,
}

/// Cross-frame visibility policy mirrored by the cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskPolicy {
    /// Sliding window length in frames (the sink is always exempt). `None`
    /// disables windowing, matching a cache that has not evicted.
    pub window: Option<usize>,
    /// When false, condition tokens of past frames are invisible, matching
    /// a cache that only stores visual rows.
    pub cache_audio: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        MaskPolicy {
            window: None,
            cache_audio: true,
        }
    }
}

/// The single attention-visibility rule. Frames are 1-based.
pub fn permits(
    variant: MaskVariant,
    policy: MaskPolicy,
    q_frame: usize,
    q_kind: TokenKind,
    k_frame: usize,
    k_kind: TokenKind,
) -> bool {
    if k_frame > q_frame {
        return false;
    }
    if k_frame < q_frame {
        if let Some(n) = policy.window {
            // Keys older than the window are gone, except the sink frame.
            if k_frame != 1 && k_frame + n <= q_frame {
                return false;
            }
        }
        if !policy.cache_audio && k_kind != TokenKind::Visual {
            return false;
        }
    }
    if variant == MaskVariant::UniAtt && q_kind == TokenKind::Audio && k_kind == TokenKind::Visual
    {
        return false;
    }
    true
}

/// The model-behavior switches exposed for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// Store condition-token keys/values of past frames in the cache.
    pub cache_audio: bool,
    pub variant: MaskVariant,
    /// Perturb teacher-forced input frames with noise during training.
    pub train_noise: bool,
    /// Use the anchor modulation; when false the spatial generator
    /// conditions on the raw frame features.
    pub adaln: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            cache_audio: true,
            variant: MaskVariant::Full,
            train_noise: true,
            adaln: true,
        }
    }
}

impl Ablation {
    pub fn flags_byte(&self) -> u8 {
        let mut b = 0u8;
        if !self.cache_audio {
            b |= 0x1;
        }
        if self.variant == MaskVariant::UniAtt {
            b |= 0x2;
        }
        if !self.train_noise {
            b |= 0x4;
        }
        if !self.adaln {
            b |= 0x8;
        }
        b
    }

    pub fn from_flags_byte(b: u8) -> Result<Self> {
        if b & !0xF != 0 {
            return Err(ModelError::Checkpoint(format!(
                "unknown ablation flags 0x{b:02x}"
            )));
        }
        Ok(Ablation {
            cache_audio: b & 0x1 == 0,
            variant: if b & 0x2 != 0 {
                MaskVariant::UniAtt
            } else {
                MaskVariant::Full
            },
            train_noise: b & 0x4 == 0,
            adaln: b & 0x8 == 0,
        })
    }
}

/// Boolean attention mask over the flattened token sequence.
#[derive(Debug, Clone)]
pub struct CausalMask {
    pub allowed: Array2<bool>,
    pub variant: MaskVariant,
}

/// Materialize the mask for `frames` frames under a layout, variant, and
/// cache policy.
pub fn build_mask(
    frames: usize,
    layout: FrameLayout,
    variant: MaskVariant,
    policy: MaskPolicy,
) -> CausalMask {
    let per = layout.frame_len();
    let total = frames * per;
    let mut allowed = Array2::from_elem((total, total), false);
    for qi in 0..total {
        let qf = qi / per + 1;
        let qk = layout.kind(qi % per);
        for ki in 0..total {
            let kf = ki / per + 1;
            let kk = layout.kind(ki % per);
            allowed[[qi, ki]] = permits(variant, policy, qf, qk, kf, kk);
        }
    }
    CausalMask { allowed, variant }
}

/// Cached keys/values of one frame, per layer.
#[derive(Debug, Clone)]
pub struct CacheFrame<F> {
    pub frame_idx: usize,
    pub pos_index: usize,
    /// Whether the condition rows are present (false = visual rows only).
    pub has_cond: bool,
    pub k: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F> CacheFrame<F> {
    fn rows(&self) -> usize {
        self.k.first().map_or(0, |m| m.nrows())
    }
}

/// Per-layer key/value store: the sink frame is retained forever, the rest
/// is a sliding window of the most recent frames.
#[derive(Debug, Clone)]
pub struct SinkWindowCache<F> {
    config_hash: [u8; 32],
    layers: usize,
    cache_audio: bool,
    sink: Option<CacheFrame<F>>,
    window: VecDeque<CacheFrame<F>>,
    frames_seen: usize,
}

impl<F: Real> SinkWindowCache<F> {
    pub fn new(cfg: &ModelConfig, cache_audio: bool) -> Self {
        SinkWindowCache {
            config_hash: cfg.content_hash(),
            layers: cfg.layers,
            cache_audio,
            sink: None,
            window: VecDeque::new(),
            frames_seen: 0,
        }
    }

    pub fn cache_audio(&self) -> bool {
        self.cache_audio
    }

    /// Frames processed so far (equals the last frame index).
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    /// Number of frames currently held (sink included).
    pub fn cached_frames(&self) -> usize {
        usize::from(self.sink.is_some()) + self.window.len()
    }

    /// Frame indices currently held, sink first.
    pub fn frame_indices(&self) -> Vec<usize> {
        self.sink
            .iter()
            .map(|f| f.frame_idx)
            .chain(self.window.iter().map(|f| f.frame_idx))
            .collect()
    }

    /// Cached token rows per layer.
    pub fn total_tokens(&self) -> usize {
        self.sink.iter().map(|f| f.rows()).sum::<usize>()
            + self.window.iter().map(|f| f.rows()).sum::<usize>()
    }

    /// True iff the sink frame's keys and values exist at every layer.
    pub fn sink_present_at_every_layer(&self) -> bool {
        self.sink.as_ref().is_some_and(|f| {
            f.k.len() == self.layers
                && f.v.len() == self.layers
                && f.k.iter().all(|m| m.nrows() > 0)
                && f.v.iter().all(|m| m.nrows() > 0)
        })
    }

    fn frames(&self) -> impl Iterator<Item = &CacheFrame<F>> {
        self.sink.iter().chain(self.window.iter())
    }

    fn append(&mut self, frame: CacheFrame<F>) {
        self.frames_seen = frame.frame_idx;
        if self.sink.is_none() {
            self.sink = Some(frame);
        } else {
            self.window.push_back(frame);
        }
    }
}

/// Drop the oldest non-sink frame if the cache grew beyond `n` frames.
pub fn cache_evict<F: Real>(cache: &mut SinkWindowCache<F>, n: usize) {
    if cache.cached_frames() > n {
        cache.window.pop_front();
    }
}

/// Inputs of one streaming step.
pub struct FrameStepInput<'a, F> {
    /// Per-frame audio embedding; `None` selects the learned null token
    /// (used for the reference frame).
    pub audio: Option<ArrayView1<'a, F>>,
    pub intensity: f64,
    /// Visual tokens fed into this slot: the reference frame at t = 1,
    /// otherwise the previous frame.
    pub visual: ArrayView2<'a, F>,
    /// 1-based frame index.
    pub frame_idx: usize,
    /// 1-based temporal position index.
    pub pos_index: usize,
}

/// Embed one frame block: [audio token, intensity token, visual tokens],
/// each with the frame's temporal position row added.
pub fn embed_frame<F: Real>(
    w: &ModelWeights<F>,
    input: &FrameStepInput<'_, F>,
) -> Result<Array2<F>> {
    let cfg = &w.cfg;
    let layout = FrameLayout::from_config(cfg);
    if input.visual.dim() != (cfg.spatial_tokens, cfg.token_dim) {
        return Err(ModelError::shape(
            "frame visual tokens",
            format!("({}, {})", cfg.spatial_tokens, cfg.token_dim),
            format!("{:?}", input.visual.dim()),
        ));
    }
    if input.pos_index < 1 || input.pos_index > w.pos_table.nrows() {
        return Err(ModelError::precondition(format!(
            "position index {} outside table of {} rows",
            input.pos_index,
            w.pos_table.nrows()
        )));
    }
    let mut x = Array2::zeros((layout.frame_len(), cfg.token_dim));
    match &input.audio {
        Some(a) => {
            if a.len() != cfg.audio_dim {
                return Err(ModelError::shape(
                    "frame audio",
                    cfg.audio_dim.to_string(),
                    a.len().to_string(),
                ));
            }
            let tok = a.dot(&w.audio_in_w) + &w.audio_in_b.row(0);
            x.row_mut(0).assign(&tok);
        }
        None => x.row_mut(0).assign(&w.null_audio.row(0)),
    }
    let bin = w.intensity_bin(input.intensity)?;
    x.row_mut(1).assign(&w.intensity_table.row(bin));
    let vis = linear(&input.visual, &w.vis_in_w, &w.vis_in_b);
    x.slice_mut(ndarray::s![COND_TOKENS.., ..]).assign(&vis);
    let pos = w.pos_table.row(input.pos_index - 1).to_owned();
    for mut row in x.rows_mut() {
        row += &pos;
    }
    Ok(x)
}

fn attend_rows<F: Real>(
    q: &Array2<F>,
    keys: &Array2<F>,
    values: &Array2<F>,
    allowed: &[Vec<bool>],
    heads: usize,
) -> Array2<F> {
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((q.nrows(), d));
    for h in 0..heads {
        let cols = ndarray::s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = keys.slice(cols);
        let vh = values.slice(cols);
        let scores = qh.dot(&kh.t()).mapv(|s| s * scale);
        for (i, srow) in scores.rows().into_iter().enumerate() {
            let weights = softmax_masked(&srow, &allowed[i]);
            let mixed = weights.dot(&vh);
            out.slice_mut(ndarray::s![i..i + 1, h * dh..(h + 1) * dh])
                .assign(&mixed.view().insert_axis(Axis(0)));
        }
    }
    out
}

fn block_forward_incremental<F: Real>(
    block: &BlockWeights<F>,
    x: &Array2<F>,
    key_rows: &Array2<F>,
    value_rows: &Array2<F>,
    allowed: &[Vec<bool>],
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let xn = layer_norm_rows(&x.view(), &block.ln1_g, &block.ln1_b, F::from_f64(NORM_EPS));
    let q = linear(&xn.view(), &block.wq, &block.bq);
    let k_cur = linear(&xn.view(), &block.wk, &block.bk);
    let v_cur = linear(&xn.view(), &block.wv, &block.bv);

    let mut keys = key_rows.clone();
    keys.append(Axis(0), k_cur.view()).expect("key append");
    let mut values = value_rows.clone();
    values.append(Axis(0), v_cur.view()).expect("value append");

    let mixed = attend_rows(&q, &keys, &values, allowed, heads);
    let attn_out = linear(&mixed.view(), &block.wo, &block.bo);
    let mut x = x + &attn_out;

    let x2 = layer_norm_rows(&x.view(), &block.ln2_g, &block.ln2_b, F::from_f64(NORM_EPS));
    let h = linear(&x2.view(), &block.w1, &block.b1).mapv(silu);
    let mlp_out = linear(&h.view(), &block.w2, &block.b2);
    x += &mlp_out;
    (x, k_cur, v_cur)
}

/// One streaming step of the frame-causal transformer. Returns the
/// condition-token outputs and visual-token outputs of this frame, appends
/// the frame's keys/values to the cache, and applies eviction.
pub fn fca_step<F: Real>(
    w: &ModelWeights<F>,
    variant: MaskVariant,
    input: &FrameStepInput<'_, F>,
    cache: &mut SinkWindowCache<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    let cfg = &w.cfg;
    if cache.config_hash != w.config_hash {
        return Err(ModelError::ConfigMismatch("SinkWindowCache".into()));
    }
    if input.frame_idx != cache.frames_seen() + 1 {
        return Err(ModelError::precondition(format!(
            "frame index {} does not follow {} frames already cached",
            input.frame_idx,
            cache.frames_seen()
        )));
    }
    let layout = FrameLayout::from_config(cfg);
    let mut x = embed_frame(w, input)?;

    // Kind/frame metadata of all key rows: cached frames in order, then the
    // current frame. The cache already encodes the window and audio-cache
    // policy, so the runtime mask only has to apply the variant rule.
    let mut key_kinds: Vec<(usize, TokenKind)> = Vec::new();
    for f in cache.frames() {
        if f.has_cond {
            for off in 0..layout.frame_len() {
                key_kinds.push((f.frame_idx, layout.kind(off)));
            }
        } else {
            for _ in 0..layout.visual_tokens {
                key_kinds.push((f.frame_idx, TokenKind::Visual));
            }
        }
    }
    for off in 0..layout.frame_len() {
        key_kinds.push((input.frame_idx, layout.kind(off)));
    }
    let policy = MaskPolicy::default();
    let allowed: Vec<Vec<bool>> = (0..layout.frame_len())
        .map(|qi| {
            let qk = layout.kind(qi);
            key_kinds
                .iter()
                .map(|&(kf, kk)| permits(variant, policy, input.frame_idx, qk, kf, kk))
                .collect()
        })
        .collect();

    let mut new_k: Vec<Array2<F>> = Vec::with_capacity(cfg.layers);
    let mut new_v: Vec<Array2<F>> = Vec::with_capacity(cfg.layers);
    for (l, block) in w.fca.iter().enumerate() {
        let (key_rows, value_rows) = stacked_layer_rows(cache, l, cfg.token_dim);
        let (next, k_cur, v_cur) =
            block_forward_incremental(block, &x, &key_rows, &value_rows, &allowed, cfg.heads);
        x = next;
        new_k.push(k_cur);
        new_v.push(v_cur);
    }
    let hfin = layer_norm_rows(&x.view(), &w.fca_lnf_g, &w.fca_lnf_b, F::from_f64(NORM_EPS));
    let h_cond = hfin.slice(ndarray::s![..COND_TOKENS, ..]).to_owned();
    let h = hfin.slice(ndarray::s![COND_TOKENS.., ..]).to_owned();

    let keep_rows = |m: &Array2<F>| {
        if cache.cache_audio() {
            m.clone()
        } else {
            m.slice(ndarray::s![COND_TOKENS.., ..]).to_owned()
        }
    };
    cache.append(CacheFrame {
        frame_idx: input.frame_idx,
        pos_index: input.pos_index,
        has_cond: cache.cache_audio(),
        k: new_k.iter().map(keep_rows).collect(),
        v: new_v.iter().map(keep_rows).collect(),
    });
    cache_evict(cache, cfg.window_frames);
    Ok((h_cond, h))
}

fn stacked_layer_rows<F: Real>(
    cache: &SinkWindowCache<F>,
    layer: usize,
    dim: usize,
) -> (Array2<F>, Array2<F>) {
    let rows = cache.total_tokens();
    let mut k = Array2::zeros((rows, dim));
    let mut v = Array2::zeros((rows, dim));
    let mut at = 0;
    for f in cache.frames() {
        let n = f.rows();
        k.slice_mut(ndarray::s![at..at + n, ..]).assign(&f.k[layer]);
        v.slice_mut(ndarray::s![at..at + n, ..]).assign(&f.v[layer]);
        at += n;
    }
    (k, v)
}

/// Full-sequence forward under an explicit mask: the recompute oracle for
/// `fca_step` and the shape of the training-time forward.
pub fn fca_full_forward<F: Real>(
    w: &ModelWeights<F>,
    variant: MaskVariant,
    policy: MaskPolicy,
    inputs: &[FrameStepInput<'_, F>],
) -> Result<Vec<(Array2<F>, Array2<F>)>> {
    let cfg = &w.cfg;
    let layout = FrameLayout::from_config(cfg);
    let per = layout.frame_len();
    let mut x = Array2::zeros((inputs.len() * per, cfg.token_dim));
    for (i, input) in inputs.iter().enumerate() {
        if input.frame_idx != i + 1 {
            return Err(ModelError::precondition(format!(
                "frame inputs must be consecutive from 1, slot {i} has index {}",
                input.frame_idx
            )));
        }
        let block = embed_frame(w, input)?;
        x.slice_mut(ndarray::s![i * per..(i + 1) * per, ..])
            .assign(&block);
    }
    let mask = build_mask(inputs.len(), layout, variant, policy);
    let allowed: Vec<Vec<bool>> = (0..x.nrows())
        .map(|q| (0..x.nrows()).map(|k| mask.allowed[[q, k]]).collect())
        .collect();

    for block in &w.fca {
        let xn = layer_norm_rows(&x.view(), &block.ln1_g, &block.ln1_b, F::from_f64(NORM_EPS));
        let q = linear(&xn.view(), &block.wq, &block.bq);
        let k = linear(&xn.view(), &block.wk, &block.bk);
        let v = linear(&xn.view(), &block.wv, &block.bv);
        let mixed = attend_rows(&q, &k, &v, &allowed, cfg.heads);
        let attn_out = linear(&mixed.view(), &block.wo, &block.bo);
        x += &attn_out;
        let x2 = layer_norm_rows(&x.view(), &block.ln2_g, &block.ln2_b, F::from_f64(NORM_EPS));
        let h = linear(&x2.view(), &block.w1, &block.b1).mapv(silu);
        let mlp_out = linear(&h.view(), &block.w2, &block.b2);
        x += &mlp_out;
    }
    let hfin = layer_norm_rows(&x.view(), &w.fca_lnf_g, &w.fca_lnf_b, F::from_f64(NORM_EPS));
    Ok((0..inputs.len())
        .map(|i| {
            let block = hfin.slice(ndarray::s![i * per..(i + 1) * per, ..]);
            (
                block.slice(ndarray::s![..COND_TOKENS, ..]).to_owned(),
                block.slice(ndarray::s![COND_TOKENS.., ..]).to_owned(),
            )
        })
        .collect())
}

/// Normalize the reference-frame features into the anchor (zero mean, unit
/// variance per token, guarded by eps).
pub fn normalize_anchor<F: Real>(h1: &Array2<F>) -> Array2<F> {
    crate::numeric::row_normalize(&h1.view(), F::from_f64(NORM_EPS))
}

/// Anchor modulation: anchor ⊙ ScaleProj(h_t) + ShiftProj(h_t), tokenwise.
pub fn adaln_sink<F: Real>(
    w: &ModelWeights<F>,
    anchor: &Array2<F>,
    h_t: &Array2<F>,
) -> Result<Array2<F>> {
    if anchor.dim() != h_t.dim() {
        return Err(ModelError::shape(
            "adaLN anchor vs features",
            format!("{:?}", anchor.dim()),
            format!("{:?}", h_t.dim()),
        ));
    }
    let scale = linear(&h_t.view(), &w.scale_w, &w.scale_b);
    let shift = linear(&h_t.view(), &w.shift_w, &w.shift_b);
    Ok(anchor * &scale + &shift)
}

/// Session-side holder of the anchor, set exactly once at frame 1.
#[derive(Debug, Clone, Default)]
pub struct AdaLnSink<F> {
    anchor: Option<Array2<F>>,
}

impl<F: Real> AdaLnSink<F> {
    pub fn new() -> Self {
        AdaLnSink { anchor: None }
    }

    pub fn is_initialized(&self) -> bool {
        self.anchor.is_some()
    }

    /// Set the anchor from the reference frame's features. Errors if the
    /// anchor was already set.
    pub fn init_from(&mut self, h1: &Array2<F>) -> Result<()> {
        if self.anchor.is_some() {
            return Err(ModelError::precondition(
                "adaLN anchor is set exactly once, at frame 1",
            ));
        }
        self.anchor = Some(normalize_anchor(h1));
        Ok(())
    }

    pub fn anchor(&self) -> Result<&Array2<F>> {
        self.anchor.as_ref().ok_or(ModelError::AnchorUninitialized)
    }

    pub fn apply(&self, w: &ModelWeights<F>, h_t: &Array2<F>) -> Result<Array2<F>> {
        adaln_sink(w, self.anchor()?, h_t)
    }
}
