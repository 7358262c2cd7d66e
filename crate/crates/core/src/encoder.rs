//! Multi-head self-attention encoder with padding masks.
//!
//! Parameters live in a [`ParamStore`] under a caller-chosen prefix, e.g.
//! `short.k3.layer0.attn.q.weight` or `long.layer1.ff.out.bias`. Weights are
//! stored `in x out` so a layer computes `x W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `x + f(LN(x))`; the identity path survives untouched.
    Pre,
    /// `LN(x + f(x))`.
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub norm: NormPlacement,
}

impl EncoderConfig {
    /// One layer, two heads, `ff_dim = 2 * model_dim`, pre-norm.
    pub fn desk(model_dim: usize) -> Self {
        Self { num_layers: 1, num_heads: 2, model_dim, ff_dim: 2 * model_dim, norm: NormPlacement::Pre }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config(format!("encoder counts must be >= 1: {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// How fresh encoder weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Every weight and bias uniform in `±1/sqrt(fan_in)`, norms at unit gain.
    Random,
    /// As `Random`, but the attention and feed-forward output projections
    /// start at zero so a pre-norm encoder is the identity map.
    ResidualIdentity,
}

/// Token matrix (`length x model_dim`) and its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, mask: Vec<bool>) -> Result<Self> {
        if tokens.rows() != mask.len() || tokens.shape().len() != 2 {
            return Err(Error::Contract(format!("{} tokens but {} mask entries", tokens.rows(), mask.len())));
        }
        Ok(Self { tokens, mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn linear_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.weight"), format!("{prefix}.bias")]
}

fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
    rng: &mut R,
) -> Result<()> {
    let [w, b] = linear_names(prefix);
    let weight = Tensor::uniform_fan_in(vec![fan_in, fan_out], fan_in, rng);
    let bias = Tensor::uniform_fan_in(vec![fan_out], fan_in, rng);
    if zero {
        store.insert(w, Tensor::zeros(vec![fan_in, fan_out]))?;
        store.insert(b, Tensor::zeros(vec![fan_out]))?;
    } else {
        store.insert(w, weight)?;
        store.insert(b, bias)?;
    }
    Ok(())
}

/// Adds one encoder's parameters under `prefix`.
pub fn init_encoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    init: Init,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    let zero_out = init == Init::ResidualIdentity;
    for layer in 0..cfg.num_layers {
        let p = format!("{prefix}.layer{layer}");
        for name in ["q", "k", "v"] {
            init_linear(store, &format!("{p}.attn.{name}"), d, d, false, rng)?;
        }
        init_linear(store, &format!("{p}.attn.out"), d, d, zero_out, rng)?;
        for ln in ["ln1", "ln2"] {
            store.insert(format!("{p}.{ln}.gain"), Tensor::filled(vec![d], 1.0))?;
            store.insert(format!("{p}.{ln}.bias"), Tensor::zeros(vec![d]))?;
        }
        init_linear(store, &format!("{p}.ff.in"), d, cfg.ff_dim, false, rng)?;
        init_linear(store, &format!("{p}.ff.out"), cfg.ff_dim, d, zero_out, rng)?;
    }
    Ok(())
}

/// Zeroes the residual-branch output projections of an existing encoder.
pub fn zero_residual_outputs(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<()> {
    for layer in 0..cfg.num_layers {
        for proj in ["attn.out", "ff.out"] {
            for name in linear_names(&format!("{prefix}.layer{layer}.{proj}")) {
                let t = store.get_mut(&name).ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(())
}

fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let [w, b] = linear_names(prefix);
    let w = g.param(store, &w)?;
    let b = g.param(store, &b)?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

fn norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    Ok(g.layer_norm(x, gain, bias, LN_EPS))
}

fn self_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    mask: &[bool],
    seq_len: usize,
    heads: usize,
) -> Result<Var> {
    let q = linear(g, store, &format!("{prefix}.q"), x)?;
    let k = linear(g, store, &format!("{prefix}.k"), x)?;
    let v = linear(g, store, &format!("{prefix}.v"), x)?;
    let a = g.attention(q, k, v, mask, seq_len, heads);
    linear(g, store, &format!("{prefix}.out"), a)
}

fn feed_forward(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.in"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.out"), h)
}

/// Encodes `x`, a stack of sequences of `seq_len` rows each, on the tape.
///
/// Sequences never attend to each other. Rows whose `mask` entry is false
/// are never attended to; their own output rows are meaningless and must be
/// dropped by the caller. A sequence without any valid row is allowed here
/// and simply yields garbage rows for the caller to mask.
pub fn encode_stacked(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    x: Var,
    mask: &[bool],
    seq_len: usize,
) -> Result<Var> {
    let (rows, width) = g.shape(x);
    if width != cfg.model_dim {
        return Err(Error::Contract(format!("token width {width} but model_dim {}", cfg.model_dim)));
    }
    if mask.len() != rows || seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::Contract(format!("{rows} rows cannot form sequences of {seq_len}")));
    }
    let mut h = x;
    for layer in 0..cfg.num_layers {
        let p = format!("{prefix}.layer{layer}");
        h = match cfg.norm {
            NormPlacement::Pre => {
                let n1 = norm(g, store, &format!("{p}.ln1"), h)?;
                let a = self_attention(g, store, &format!("{p}.attn"), n1, mask, seq_len, cfg.num_heads)?;
                let h1 = g.add(h, a);
                let n2 = norm(g, store, &format!("{p}.ln2"), h1)?;
                let f = feed_forward(g, store, &format!("{p}.ff"), n2)?;
                g.add(h1, f)
            }
            NormPlacement::Post => {
                let a = self_attention(g, store, &format!("{p}.attn"), h, mask, seq_len, cfg.num_heads)?;
                let s1 = g.add(h, a);
                let h1 = norm(g, store, &format!("{p}.ln1"), s1)?;
                let f = feed_forward(g, store, &format!("{p}.ff"), h1)?;
                let s2 = g.add(h1, f);
                norm(g, store, &format!("{p}.ln2"), s2)?
            }
        };
    }
    Ok(h)
}

/// Runs one sequence through the encoder stored under `prefix`.
pub fn encoder_forward(
    seq: &TokenSequence,
    cfg: &EncoderConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<TokenSequence> {
    cfg.validate()?;
    if seq.tokens.cols() != cfg.model_dim {
        return Err(Error::Contract(format!("token width {} but model_dim {}", seq.tokens.cols(), cfg.model_dim)));
    }
    if seq.valid_count() == 0 {
        return Err(Error::AllMasked("encoder input has no valid token".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(seq.tokens.clone());
    let y = encode_stacked(&mut g, params, prefix, cfg, x, &seq.mask, seq.len())?;
    let out = g.value(y).clone();
    TokenSequence::new(out, seq.mask.clone())
}
