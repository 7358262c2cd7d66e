//! Short-term multi-scale difference encoding, long-term residual encoding
//! and the fusions that turn a frame sequence into one video embedding.
//!
//! Every operation exists in two forms: a tape form (`*_graph`) that works on
//! a whole batch of videos and is what training differentiates through, and
//! a plain form that evaluates one video and returns a vector.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{encode_stacked, EncoderConfig, NormPlacement, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Fixed-length per-frame embeddings with trailing zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureSequence {
    frames: Tensor,
    valid_count: usize,
    mask: Vec<bool>,
}

impl FrameFeatureSequence {
    /// Takes an `n_max x dim` matrix; rows at and after `valid_count` are
    /// overwritten with zeros.
    pub fn new(mut frames: Tensor, valid_count: usize) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(Error::Contract("frames must be an n_max x dim matrix".into()));
        }
        let (n_max, dim) = (frames.rows(), frames.cols());
        if valid_count == 0 || valid_count > n_max {
            return Err(Error::Contract(format!("valid_count {valid_count} outside 1..={n_max}")));
        }
        frames.values_mut()[valid_count * dim..].iter_mut().for_each(|v| *v = 0.0);
        let mask = (0..n_max).map(|i| i < valid_count).collect();
        Ok(Self { frames, valid_count, mask })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// Mutable access to the raw frame matrix. Writing into padding rows
    /// breaks the zero-padding invariant; the encoders ignore those rows
    /// regardless.
    pub fn frames_mut(&mut self) -> &mut Tensor {
        &mut self.frames
    }

    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_max(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    /// Mean of the valid frames.
    pub fn mean_frame(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for r in 0..self.valid_count {
            out.iter_mut().zip(self.frames.row_slice(r)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= self.valid_count as f64);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Mean,
    Concat,
    Attention,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "concat" => Ok(Self::Concat),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Scale list and short-term branch layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub scales: Vec<usize>,
    /// Configuration used for every per-scale encoder (weights are not shared).
    pub encoder: EncoderConfig,
    pub fusion: FusionStrategy,
    pub use_difference: bool,
}

impl ScaleSpec {
    pub fn validate(&self, n_max: usize) -> Result<()> {
        self.encoder.validate()?;
        if self.scales.is_empty() {
            return Err(Error::Config("scale list is empty".into()));
        }
        for (i, &k) in self.scales.iter().enumerate() {
            if k == 0 || !n_max.is_multiple_of(k) {
                return Err(Error::Config(format!("scale {k} does not divide n_max {n_max}")));
            }
            if self.scales[..i].contains(&k) {
                return Err(Error::Config(format!("scale {k} listed twice")));
            }
        }
        Ok(())
    }

    /// Subsets per video at each scale.
    pub fn subset_counts(&self, n_max: usize) -> Vec<usize> {
        self.scales.iter().map(|k| n_max / k).collect()
    }
}

/// Convex weight between short-term and long-term features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    alpha: f64,
}

impl FusionParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { alpha: 0.4 }
    }
}

/// Switches between the default and the literal readings of the pooling and
/// masking rules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalOptions {
    /// Divide pooled sums by the full token count (`m * k`, or `n_max` for
    /// the long-term branch) instead of the number of valid tokens.
    pub literal_normalization: bool,
    /// Mask the wrap difference whenever the frame after it is padding.
    pub strict_diff_mask: bool,
}

/// The `m = n_max / k` subsets of one video at scale `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetBatch {
    pub k: usize,
    /// Whether each subset holds `[guide, d_1 .. d_k]` rather than raw frames.
    pub difference: bool,
    pub subsets: Vec<TokenSequence>,
}

impl SubsetBatch {
    pub fn m(&self) -> usize {
        self.subsets.len()
    }

    pub fn token_len(&self) -> usize {
        if self.difference {
            self.k + 1
        } else {
            self.k
        }
    }

    /// Replaces every subset by its difference sequence.
    pub fn into_differences(self, strict: bool) -> Result<Self> {
        if self.difference {
            return Ok(self);
        }
        let subsets = self.subsets.iter().map(|s| compute_differences(s, strict)).collect::<Result<_>>()?;
        Ok(Self { k: self.k, difference: true, subsets })
    }
}

/// Splits a video into contiguous subsets of `k` frames.
pub fn partition_subsets(seq: &FrameFeatureSequence, k: usize) -> Result<SubsetBatch> {
    let n = seq.n_max();
    if k == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!("scale {k} does not divide n_max {n}")));
    }
    let d = seq.dim();
    let subsets = (0..n / k)
        .map(|i| {
            let rows = seq.frames.values()[i * k * d..(i + 1) * k * d].to_vec();
            TokenSequence::new(Tensor::matrix(k, d, rows), seq.mask[i * k..(i + 1) * k].to_vec())
        })
        .collect::<Result<_>>()?;
    Ok(SubsetBatch { k, difference: false, subsets })
}

/// Builds `[guide, d_1, .., d_k]` from a subset of `k` frames.
///
/// With `t` valid frames, `d_i = v_{i+1} - v_i` for `i < t`, the wrap
/// difference `d_t = v_1 - v_t`, and zero masked tokens after `t`. The guide
/// is the first frame. A subset without valid frames yields `k + 1` masked
/// zero tokens. With `strict` set, the wrap token is masked (and zeroed)
/// when `t < k`.
pub fn compute_differences(subset: &TokenSequence, strict: bool) -> Result<TokenSequence> {
    let k = subset.len();
    let d = subset.tokens.cols();
    let t = subset.valid_count();
    if subset.mask.iter().enumerate().any(|(i, &m)| m != (i < t)) {
        return Err(Error::Contract("subset padding must be trailing".into()));
    }
    let mut values = vec![0.0; (k + 1) * d];
    let mut mask = vec![false; k + 1];
    if t == 0 {
        return TokenSequence::new(Tensor::matrix(k + 1, d, values), mask);
    }
    let frame = |i: usize| subset.tokens.row_slice(i);
    values[..d].copy_from_slice(frame(0));
    mask[0] = true;
    // token i (1-based) pairs frames i and i+1 (1-based), i.e. rows i-1 and i
    for i in 1..t {
        let (a, b) = (frame(i - 1), frame(i));
        for j in 0..d {
            values[i * d + j] = b[j] - a[j];
        }
        mask[i] = true;
    }
    let wrap_valid = !strict || t == k;
    if wrap_valid {
        let (first, last) = (frame(0), frame(t - 1));
        for j in 0..d {
            values[t * d + j] = first[j] - last[j];
        }
        mask[t] = true;
    }
    TokenSequence::new(Tensor::matrix(k + 1, d, values), mask)
}

pub fn pos_name(k: usize) -> String {
    format!("short.k{k}.pos")
}

pub fn short_prefix(k: usize) -> String {
    format!("short.k{k}")
}

pub const LONG_PREFIX: &str = "long";
pub const CONCAT_PREFIX: &str = "fuse.concat";

/// Builds a `batch x rows` pooling matrix from per-video token masks.
fn pooling_weights(masks: &[Vec<bool>], literal_denominator: Option<usize>) -> Result<Tensor> {
    let rows_per = masks.first().map_or(0, Vec::len);
    let total = rows_per * masks.len();
    let mut w = vec![0.0; masks.len() * total];
    for (b, mask) in masks.iter().enumerate() {
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::AllMasked(format!("video {b} has no valid token to pool")));
        }
        let denom = literal_denominator.unwrap_or(valid) as f64;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                w[b * total + b * rows_per + i] = 1.0 / denom;
            }
        }
    }
    Ok(Tensor::matrix(masks.len(), total, w))
}

/// Short-term feature `s^k` for each video's subset batch, as a
/// `batch x dim` node.
pub fn short_term_graph(
    g: &mut Graph,
    store: &ParamStore,
    batches: &[SubsetBatch],
    k: usize,
    encoder: &EncoderConfig,
    opts: TemporalOptions,
) -> Result<Var> {
    let first = batches.first().ok_or_else(|| Error::Contract("no videos to encode".into()))?;
    let (difference, m, len) = (first.difference, first.m(), first.token_len());
    let d = encoder.model_dim;
    let mut rows = Vec::new();
    let mut masks = Vec::with_capacity(batches.len());
    for b in batches {
        if b.k != k || b.difference != difference || b.m() != m {
            return Err(Error::Contract("subset batches disagree in layout".into()));
        }
        let mut video_mask = Vec::with_capacity(m * len);
        for s in &b.subsets {
            if s.tokens.cols() != d || s.len() != len {
                return Err(Error::Contract(format!("subset is {}x{}, expected {len}x{d}", s.len(), s.tokens.cols())));
            }
            for (r, &valid) in s.mask.iter().enumerate() {
                if valid {
                    rows.extend_from_slice(s.tokens.row_slice(r));
                } else {
                    rows.extend(std::iter::repeat_n(0.0, d));
                }
            }
            video_mask.extend_from_slice(&s.mask);
        }
        masks.push(video_mask);
    }
    let n = batches.len() * m * len;
    let flat_mask: Vec<bool> = masks.concat();
    let mut x = g.constant(Tensor::matrix(n, d, rows));
    if difference {
        let pos = g.param(store, &pos_name(k))?;
        let (pr, pc) = g.shape(pos);
        if (pr, pc) != (len, d) {
            return Err(Error::Contract(format!("position table is {pr}x{pc}, expected {len}x{d}")));
        }
        let index = (0..n).map(|i| i % len).collect();
        let tiled = g.gather_rows(pos, index);
        let keep = g.constant(Tensor::matrix(n, 1, flat_mask.iter().map(|&m| f64::from(u8::from(m))).collect()));
        let masked = g.mul_col(tiled, keep);
        x = g.add(x, masked);
    }
    let y = encode_stacked(g, store, &short_prefix(k), encoder, x, &flat_mask, len)?;
    let literal = opts.literal_normalization.then_some(m * k);
    let w = g.constant(pooling_weights(&masks, literal)?);
    Ok(g.matmul(w, y))
}

/// Long-term feature `l` for each video, as a `batch x dim` node: the
/// masked mean of frames plus their encoder residual.
pub fn long_term_graph(
    g: &mut Graph,
    store: &ParamStore,
    videos: &[&FrameFeatureSequence],
    encoder: &EncoderConfig,
    opts: TemporalOptions,
) -> Result<Var> {
    let first = videos.first().ok_or_else(|| Error::Contract("no videos to encode".into()))?;
    let (n_max, d) = (first.n_max(), encoder.model_dim);
    let mut rows = Vec::with_capacity(videos.len() * n_max * d);
    let mut masks = Vec::with_capacity(videos.len());
    for v in videos {
        if v.n_max() != n_max || v.dim() != d {
            return Err(Error::Contract(format!("video is {}x{}, expected {n_max}x{d}", v.n_max(), v.dim())));
        }
        rows.extend_from_slice(&v.frames.values()[..v.valid_count * d]);
        rows.extend(std::iter::repeat_n(0.0, (n_max - v.valid_count) * d));
        masks.push(v.mask.clone());
    }
    let flat_mask = masks.concat();
    let x = g.constant(Tensor::matrix(videos.len() * n_max, d, rows));
    let y = encode_stacked(g, store, LONG_PREFIX, encoder, x, &flat_mask, n_max)?;
    // a pre-norm encoder already carries x along its identity path
    let y = match encoder.norm {
        NormPlacement::Pre => y,
        NormPlacement::Post => g.add(x, y),
    };
    let literal = opts.literal_normalization.then_some(n_max);
    let w = g.constant(pooling_weights(&masks, literal)?);
    Ok(g.matmul(w, y))
}

/// Fuses per-scale `batch x dim` features into one `batch x dim` node.
pub fn fuse_scales_graph(
    g: &mut Graph,
    store: &ParamStore,
    features: &[Var],
    strategy: FusionStrategy,
    long_ref: Option<Var>,
) -> Result<Var> {
    let (&first, rest) = features.split_first().ok_or_else(|| Error::Contract("no scale features to fuse".into()))?;
    let shape = g.shape(first);
    if rest.iter().any(|&f| g.shape(f) != shape) {
        return Err(Error::Contract("scale features differ in shape".into()));
    }
    match strategy {
        FusionStrategy::Mean => {
            let mut acc = first;
            for &f in rest {
                acc = g.add(acc, f);
            }
            Ok(if features.len() == 1 { acc } else { g.scale(acc, 1.0 / features.len() as f64) })
        }
        FusionStrategy::Concat => {
            let cat = g.concat_cols(features);
            let w = g.param(store, &format!("{CONCAT_PREFIX}.weight"))?;
            let b = g.param(store, &format!("{CONCAT_PREFIX}.bias"))?;
            if g.shape(w) != (features.len() * shape.1, shape.1) {
                return Err(Error::Contract("concat projection does not match the scale list".into()));
            }
            let y = g.matmul(cat, w);
            Ok(g.add_row(y, b))
        }
        FusionStrategy::Attention => {
            let query = long_ref.ok_or_else(|| Error::Contract("attention fusion needs a long-term query".into()))?;
            if g.shape(query) != shape {
                return Err(Error::Contract("long-term query shape differs from scale features".into()));
            }
            let scale = 1.0 / (shape.1 as f64).sqrt();
            let logits: Vec<Var> = features
                .iter()
                .map(|&f| {
                    let p = g.mul(query, f);
                    let s = g.sum_cols(p);
                    g.scale(s, scale)
                })
                .collect();
            let logits = g.concat_cols(&logits);
            let weights = g.softmax_rows(logits, vec![true; shape.0 * features.len()], false)?;
            let mut acc = None;
            for (i, &f) in features.iter().enumerate() {
                let w = g.slice_cols(weights, i, 1);
                let term = g.mul_col(f, w);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            Ok(acc.expect("at least one feature"))
        }
    }
}

/// `alpha * s + (1 - alpha) * l`.
pub fn fuse_video_graph(g: &mut Graph, s: Var, l: Var, fp: FusionParams) -> Result<Var> {
    if g.shape(s) != g.shape(l) {
        return Err(Error::Contract("short and long features differ in shape".into()));
    }
    let a = g.scale(s, fp.alpha);
    let b = g.scale(l, 1.0 - fp.alpha);
    Ok(g.add(a, b))
}

fn single_row(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).values().to_vec()
}

/// Short-term feature `s^k` of one video.
pub fn short_term_encode(
    batch: &SubsetBatch,
    params: &ParamStore,
    encoder: &EncoderConfig,
    opts: TemporalOptions,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let s = short_term_graph(&mut g, params, std::slice::from_ref(batch), batch.k, encoder, opts)?;
    Ok(single_row(&g, s))
}

/// Long-term feature `l` of one video.
pub fn long_term_encode(
    seq: &FrameFeatureSequence,
    params: &ParamStore,
    encoder: &EncoderConfig,
    opts: TemporalOptions,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let l = long_term_graph(&mut g, params, &[seq], encoder, opts)?;
    Ok(single_row(&g, l))
}

/// Fuses per-scale vectors of one video.
pub fn fuse_scales(
    features: &[Vec<f64>],
    strategy: FusionStrategy,
    long_ref: Option<&[f64]>,
    params: &ParamStore,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = features.iter().map(|f| g.constant(Tensor::row(f.clone()))).collect();
    let long = long_ref.map(|l| g.constant(Tensor::row(l.to_vec())));
    let s = fuse_scales_graph(&mut g, params, &vars, strategy, long)?;
    Ok(single_row(&g, s))
}

pub fn fuse_video(s: &[f64], l: &[f64], fp: FusionParams) -> Result<Vec<f64>> {
    if s.len() != l.len() {
        return Err(Error::Contract("short and long features differ in length".into()));
    }
    Ok(s.iter().zip(l).map(|(a, b)| fp.alpha * a + (1.0 - fp.alpha) * b).collect())
}
