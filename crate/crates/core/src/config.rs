//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not listed in
//! [`RUN_KEYS`] are rejected. A `preset` key, wherever it appears, is
//! applied before every other key.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::encoder::{EncoderConfig, Init, NormPlacement};
use crate::error::{Error, Result};
use crate::eval::TieBreak;
use crate::model::ModelConfig;
use crate::objective::{KlReduction, LossParams};
use crate::temporal::{FusionParams, FusionStrategy};

/// Every recognised run key with a one-line description.
pub const RUN_KEYS: &[(&str, &str)] = &[
    ("preset", "desk | full; applied before all other keys"),
    ("data", "directory holding videos.emb, captions.emb, pairs.prs; empty for synthetic data"),
    ("synth.seed", "synthetic data seed"),
    ("synth.num_videos", "synthetic video count"),
    ("synth.captions_per_video", "synthetic captions per video"),
    ("synth.cluster_count", "synthetic cluster count"),
    ("synth.noise_sigma", "synthetic noise scale"),
    ("synth.motion_signal", "twin clusters separable only by frame differences"),
    ("val_videos", "trailing videos held out for validation; 0 validates on the training set"),
    ("dim", "embedding width"),
    ("n_max", "frames per video, padding included"),
    ("scales", "comma separated subset lengths, each dividing n_max"),
    ("fusion", "mean | concat | attention"),
    ("use_difference", "difference tokens in the short-term branch"),
    ("literal_normalization", "divide pooled sums by the full token count"),
    ("strict_diff_mask", "mask the wrap difference when the next frame is padding"),
    ("short.layers", "short-term encoder layers"),
    ("short.heads", "short-term encoder heads"),
    ("short.ff_dim", "short-term feed-forward width"),
    ("short.norm", "pre | post"),
    ("long.layers", "long-term encoder layers"),
    ("long.heads", "long-term encoder heads"),
    ("long.ff_dim", "long-term feed-forward width"),
    ("long.norm", "pre | post"),
    ("init", "random | residual_identity"),
    ("alpha", "short-term weight in the video feature"),
    ("video_projection", "learned residual projection of video features"),
    ("caption_projection", "learned residual projection of caption features"),
    ("beta", "binary similarity loss weight"),
    ("logit_scale", "similarity multiplier inside the softmaxes"),
    ("kl_swap", "KL(intra || cross) instead of KL(cross || intra)"),
    ("kl_reduction", "mean | sum over rows"),
    ("tie", "optimistic | pessimistic rank ties"),
    ("lr.backbone", "learning rate of the projection group"),
    ("lr.temporal", "learning rate of the temporal module"),
    ("adam.beta1", "first moment decay"),
    ("adam.beta2", "second moment decay"),
    ("adam.eps", "denominator guard"),
    ("cosine_steps", "cosine decay horizon in steps; 0 uses the run length"),
    ("batch_size", "pairs per batch, at least 2"),
    ("epochs", "passes over the training pairs"),
    ("max_steps", "stop after this many steps; 0 for no cap"),
    ("seed", "parameter and batching seed"),
    ("drop_last", "drop the final short batch of each epoch"),
];

/// Keys of a synthetic data spec file.
pub const SYNTH_KEYS: &[(&str, &str)] = &[
    ("seed", "generator seed"),
    ("num_videos", "video count"),
    ("captions_per_video", "captions per video"),
    ("dim", "embedding width"),
    ("n_max", "frames per video"),
    ("cluster_count", "cluster count"),
    ("noise_sigma", "noise scale"),
    ("motion_signal", "twin clusters separable only by frame differences"),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_temporal: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// 0 means the total number of steps of the run.
    pub cosine_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr_backbone: 1e-7, lr_temporal: 4e-4, beta1: 0.9, beta2: 0.98, eps: 1e-8, cosine_steps: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr.backbone", self.lr_backbone), ("lr.temporal", self.lr_temporal)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} {lr} must be a finite non-negative rate")));
            }
        }
        for (name, b) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("adam.eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset directory; `None` generates `synth` instead.
    pub data: Option<PathBuf>,
    /// Its `dim` and `n_max` always mirror the model's.
    pub synth: SynthSpec,
    pub val_videos: usize,
    pub model: ModelConfig,
    pub init: Init,
    pub loss: LossParams,
    pub tie: TieBreak,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// 0 for no cap.
    pub max_steps: usize,
    pub seed: u64,
    pub drop_last: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small synthetic run: 16 videos of 12 frames at width 16, scales
    /// {3, 4}, one batch per epoch, encoders starting as the identity.
    pub fn desk() -> Self {
        let mut model = ModelConfig::desk(16, 12);
        model.short.scales = vec![3, 4];
        Self {
            data: None,
            synth: SynthSpec::default(),
            val_videos: 0,
            model,
            init: Init::ResidualIdentity,
            loss: LossParams::default(),
            tie: TieBreak::Optimistic,
            optim: OptimConfig { lr_temporal: 3e-3, ..OptimConfig::default() },
            batch_size: 16,
            epochs: 200,
            max_steps: 0,
            seed: 0,
            drop_last: false,
        }
    }

    /// Full-size settings: width 512, scales {3, 4, 6} with four 8-head
    /// layers each, batch 128 for 5 epochs. Needs a real dataset.
    pub fn full() -> Self {
        let enc = EncoderConfig { num_layers: 4, num_heads: 8, model_dim: 512, ff_dim: 2048, norm: NormPlacement::Pre };
        let mut model = ModelConfig::desk(512, 12);
        model.short.encoder = enc;
        model.long = enc;
        Self {
            synth: SynthSpec { dim: 512, n_max: 12, ..SynthSpec::default() },
            model,
            optim: OptimConfig::default(),
            batch_size: 128,
            epochs: 5,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if self.data.is_none() {
            self.synth.validate()?;
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} must be at least 2", self.batch_size)));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = parse_kv(text)?;
        let mut cfg = match entries.iter().find(|(_, k, _)| k == "preset") {
            Some((_, _, v)) => Self::preset(v)?,
            None => Self::desk(),
        };
        for (line, key, value) in &entries {
            if key != "preset" {
                cfg.set(key, value).map_err(|e| Error::Config(format!("line {line}: {}", message(e))))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key; unknown keys and unparsable values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "preset" => return Err(Error::Config("preset only applies when parsing a file".into())),
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "synth.seed" => self.synth.seed = num(key, value)?,
            "synth.num_videos" => self.synth.num_videos = num(key, value)?,
            "synth.captions_per_video" => self.synth.captions_per_video = num(key, value)?,
            "synth.cluster_count" => self.synth.cluster_count = num(key, value)?,
            "synth.noise_sigma" => self.synth.noise_sigma = num(key, value)?,
            "synth.motion_signal" => self.synth.motion_signal = flag(key, value)?,
            "val_videos" => self.val_videos = num(key, value)?,
            "dim" => {
                let d = num(key, value)?;
                m.dim = d;
                m.short.encoder.model_dim = d;
                m.long.model_dim = d;
                self.synth.dim = d;
            }
            "n_max" => {
                m.n_max = num(key, value)?;
                self.synth.n_max = m.n_max;
            }
            "scales" => {
                m.short.scales = value.split(',').map(|s| num(key, s.trim())).collect::<Result<Vec<usize>>>()?;
            }
            "fusion" => m.short.fusion = FusionStrategy::from_str(value)?,
            "use_difference" => m.short.use_difference = flag(key, value)?,
            "literal_normalization" => m.options.literal_normalization = flag(key, value)?,
            "strict_diff_mask" => m.options.strict_diff_mask = flag(key, value)?,
            "short.layers" => m.short.encoder.num_layers = num(key, value)?,
            "short.heads" => m.short.encoder.num_heads = num(key, value)?,
            "short.ff_dim" => m.short.encoder.ff_dim = num(key, value)?,
            "short.norm" => m.short.encoder.norm = norm(value)?,
            "long.layers" => m.long.num_layers = num(key, value)?,
            "long.heads" => m.long.num_heads = num(key, value)?,
            "long.ff_dim" => m.long.ff_dim = num(key, value)?,
            "long.norm" => m.long.norm = norm(value)?,
            "init" => self.init = init(value)?,
            "alpha" => m.fusion = FusionParams::new(num(key, value)?)?,
            "video_projection" => m.video_projection = flag(key, value)?,
            "caption_projection" => m.caption_projection = flag(key, value)?,
            "beta" => self.loss.beta = num(key, value)?,
            "logit_scale" => self.loss.logit_scale = num(key, value)?,
            "kl_swap" => self.loss.kl_swap = flag(key, value)?,
            "kl_reduction" => self.loss.kl_reduction = kl_reduction(value)?,
            "tie" => self.tie = TieBreak::from_str(value)?,
            "lr.backbone" => self.optim.lr_backbone = num(key, value)?,
            "lr.temporal" => self.optim.lr_temporal = num(key, value)?,
            "adam.beta1" => self.optim.beta1 = num(key, value)?,
            "adam.beta2" => self.optim.beta2 = num(key, value)?,
            "adam.eps" => self.optim.eps = num(key, value)?,
            "cosine_steps" => self.optim.cosine_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "drop_last" => self.drop_last = flag(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key except `preset`, in [`RUN_KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let scales: Vec<String> = m.short.scales.iter().map(usize::to_string).collect();
        vec![
            ("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("synth.seed", self.synth.seed.to_string()),
            ("synth.num_videos", self.synth.num_videos.to_string()),
            ("synth.captions_per_video", self.synth.captions_per_video.to_string()),
            ("synth.cluster_count", self.synth.cluster_count.to_string()),
            ("synth.noise_sigma", self.synth.noise_sigma.to_string()),
            ("synth.motion_signal", self.synth.motion_signal.to_string()),
            ("val_videos", self.val_videos.to_string()),
            ("dim", m.dim.to_string()),
            ("n_max", m.n_max.to_string()),
            ("scales", scales.join(",")),
            ("fusion", fusion_name(m.short.fusion).into()),
            ("use_difference", m.short.use_difference.to_string()),
            ("literal_normalization", m.options.literal_normalization.to_string()),
            ("strict_diff_mask", m.options.strict_diff_mask.to_string()),
            ("short.layers", m.short.encoder.num_layers.to_string()),
            ("short.heads", m.short.encoder.num_heads.to_string()),
            ("short.ff_dim", m.short.encoder.ff_dim.to_string()),
            ("short.norm", norm_name(m.short.encoder.norm).into()),
            ("long.layers", m.long.num_layers.to_string()),
            ("long.heads", m.long.num_heads.to_string()),
            ("long.ff_dim", m.long.ff_dim.to_string()),
            ("long.norm", norm_name(m.long.norm).into()),
            ("init", init_name(self.init).into()),
            ("alpha", m.fusion.alpha().to_string()),
            ("video_projection", m.video_projection.to_string()),
            ("caption_projection", m.caption_projection.to_string()),
            ("beta", self.loss.beta.to_string()),
            ("logit_scale", self.loss.logit_scale.to_string()),
            ("kl_swap", self.loss.kl_swap.to_string()),
            ("kl_reduction", kl_reduction_name(self.loss.kl_reduction).into()),
            ("tie", tie_name(self.tie).into()),
            ("lr.backbone", self.optim.lr_backbone.to_string()),
            ("lr.temporal", self.optim.lr_temporal.to_string()),
            ("adam.beta1", self.optim.beta1.to_string()),
            ("adam.beta2", self.optim.beta2.to_string()),
            ("adam.eps", self.optim.eps.to_string()),
            ("cosine_steps", self.optim.cosine_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("drop_last", self.drop_last.to_string()),
        ]
    }

    /// Text that [`RunConfig::parse`] reads back to an equal config, with
    /// each key's description as a comment.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            let doc = RUN_KEYS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| d);
            out.push_str(&format!("# {doc}\n{key} = {value}\n"));
        }
        out
    }
}

/// Reads a synthetic data spec file; unlisted keys keep their defaults.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for (line, key, value) in parse_kv(text)? {
        let r = match key.as_str() {
            "seed" => num(&key, &value).map(|v| spec.seed = v),
            "num_videos" => num(&key, &value).map(|v| spec.num_videos = v),
            "captions_per_video" => num(&key, &value).map(|v| spec.captions_per_video = v),
            "dim" => num(&key, &value).map(|v| spec.dim = v),
            "n_max" => num(&key, &value).map(|v| spec.n_max = v),
            "cluster_count" => num(&key, &value).map(|v| spec.cluster_count = v),
            "noise_sigma" => num(&key, &value).map(|v| spec.noise_sigma = v),
            "motion_signal" => flag(&key, &value).map(|v| spec.motion_signal = v),
            other => Err(Error::Config(format!("unknown key {other:?}"))),
        };
        r.map_err(|e| Error::Config(format!("line {line}: {}", message(e))))?;
    }
    spec.validate()?;
    Ok(spec)
}

pub fn synth_spec_to_text(spec: &SynthSpec) -> String {
    let values = [
        spec.seed.to_string(),
        spec.num_videos.to_string(),
        spec.captions_per_video.to_string(),
        spec.dim.to_string(),
        spec.n_max.to_string(),
        spec.cluster_count.to_string(),
        spec.noise_sigma.to_string(),
        spec.motion_signal.to_string(),
    ];
    SYNTH_KEYS.iter().zip(values).map(|((key, doc), value)| format!("# {doc}\n{key} = {value}\n")).collect()
}

/// `(line number, key, value)` triples; duplicate keys are rejected.
fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        if out.iter().any(|(_, k, _)| k == key) {
            return Err(Error::Config(format!("line {}: duplicate key {key:?}", i + 1)));
        }
        out.push((i + 1, key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn norm(value: &str) -> Result<NormPlacement> {
    match value {
        "pre" => Ok(NormPlacement::Pre),
        "post" => Ok(NormPlacement::Post),
        other => Err(Error::Config(format!("unknown norm placement {other:?}"))),
    }
}

fn norm_name(n: NormPlacement) -> &'static str {
    match n {
        NormPlacement::Pre => "pre",
        NormPlacement::Post => "post",
    }
}

fn init(value: &str) -> Result<Init> {
    match value {
        "random" => Ok(Init::Random),
        "residual_identity" => Ok(Init::ResidualIdentity),
        other => Err(Error::Config(format!("unknown init {other:?}"))),
    }
}

fn init_name(i: Init) -> &'static str {
    match i {
        Init::Random => "random",
        Init::ResidualIdentity => "residual_identity",
    }
}

fn kl_reduction(value: &str) -> Result<KlReduction> {
    match value {
        "mean" => Ok(KlReduction::Mean),
        "sum" => Ok(KlReduction::Sum),
        other => Err(Error::Config(format!("unknown kl_reduction {other:?}"))),
    }
}

fn kl_reduction_name(k: KlReduction) -> &'static str {
    match k {
        KlReduction::Mean => "mean",
        KlReduction::Sum => "sum",
    }
}

fn fusion_name(f: FusionStrategy) -> &'static str {
    match f {
        FusionStrategy::Mean => "mean",
        FusionStrategy::Concat => "concat",
        FusionStrategy::Attention => "attention",
    }
}

fn tie_name(t: TieBreak) -> &'static str {
    match t {
        TieBreak::Optimistic => "optimistic",
        TieBreak::Pessimistic => "pessimistic",
    }
}
