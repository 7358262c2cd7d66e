//! The full video tower (short-term branch, long-term branch, fusion) plus
//! the optional linear caption and video projections.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{init_encoder, EncoderConfig, Init};
use crate::error::{Error, Result};
use crate::temporal::{
    fuse_scales_graph, fuse_video_graph, long_term_graph, partition_subsets, pos_name, short_prefix, short_term_graph,
    FrameFeatureSequence, FusionParams, FusionStrategy, ScaleSpec, TemporalOptions, CONCAT_PREFIX, LONG_PREFIX,
};
use crate::tensor::{ParamStore, Tensor};

pub const VIDEO_PROJ: &str = "proj.video.weight";
pub const CAPTION_PROJ: &str = "proj.caption.weight";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_max: usize,
    pub short: ScaleSpec,
    pub long: EncoderConfig,
    pub fusion: FusionParams,
    pub options: TemporalOptions,
    pub video_projection: bool,
    pub caption_projection: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: scales {3, 4, 6}, one-layer two-head encoders.
    pub fn desk(dim: usize, n_max: usize) -> Self {
        Self {
            dim,
            n_max,
            short: ScaleSpec {
                scales: vec![3, 4, 6],
                encoder: EncoderConfig::desk(dim),
                fusion: FusionStrategy::Mean,
                use_difference: true,
            },
            long: EncoderConfig::desk(dim),
            fusion: FusionParams::default(),
            options: TemporalOptions::default(),
            video_projection: false,
            caption_projection: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.short.validate(self.n_max)?;
        self.long.validate()?;
        if self.short.encoder.model_dim != self.dim || self.long.model_dim != self.dim {
            return Err(Error::Config(format!("encoder width must equal the embedding dim {}", self.dim)));
        }
        Ok(())
    }
}

/// Parameter names belonging to the projection ("backbone-equivalent")
/// group; everything else is the temporal module.
pub fn is_projection_param(name: &str) -> bool {
    name.starts_with("proj.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mstdt {
    cfg: ModelConfig,
}

impl Mstdt {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters in a fixed order: per-scale encoders and position
    /// tables, the long-term encoder, fusion weights, projections.
    pub fn init_params<R: Rng + ?Sized>(&self, init: Init, rng: &mut R) -> Result<ParamStore> {
        let c = &self.cfg;
        let d = c.dim;
        let mut store = ParamStore::new();
        for &k in &c.short.scales {
            init_encoder(&mut store, &short_prefix(k), &c.short.encoder, init, rng)?;
            if c.short.use_difference {
                store.insert(pos_name(k), Tensor::uniform_fan_in(vec![k + 1, d], d, rng))?;
            }
        }
        init_encoder(&mut store, LONG_PREFIX, &c.long, init, rng)?;
        if c.short.fusion == FusionStrategy::Concat {
            let fan_in = c.short.scales.len() * d;
            store.insert(format!("{CONCAT_PREFIX}.weight"), Tensor::uniform_fan_in(vec![fan_in, d], fan_in, rng))?;
            store.insert(format!("{CONCAT_PREFIX}.bias"), Tensor::uniform_fan_in(vec![d], fan_in, rng))?;
        }
        if c.video_projection {
            store.insert(VIDEO_PROJ, Tensor::zeros(vec![d, d]))?;
        }
        if c.caption_projection {
            store.insert(CAPTION_PROJ, Tensor::zeros(vec![d, d]))?;
        }
        Ok(store)
    }

    /// Checks that `store` holds every parameter with the expected shape.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = self.init_params(Init::Random, &mut rng)?;
        for (name, t) in reference.iter() {
            let got = store.get(name).ok_or_else(|| Error::Contract(format!("checkpoint lacks parameter {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Short-term feature `s` (fused over scales) and long-term `l` for a
    /// batch of videos.
    pub fn branches(&self, g: &mut Graph, store: &ParamStore, videos: &[&FrameFeatureSequence]) -> Result<(Var, Var)> {
        let c = &self.cfg;
        for v in videos {
            if v.dim() != c.dim || v.n_max() != c.n_max {
                return Err(Error::Contract(format!(
                    "video is {}x{}, model expects {}x{}",
                    v.n_max(),
                    v.dim(),
                    c.n_max,
                    c.dim
                )));
            }
        }
        let long = long_term_graph(g, store, videos, &c.long, c.options)?;
        let mut per_scale = Vec::with_capacity(c.short.scales.len());
        for &k in &c.short.scales {
            let batches = videos
                .iter()
                .map(|v| {
                    let b = partition_subsets(v, k)?;
                    if c.short.use_difference {
                        b.into_differences(c.options.strict_diff_mask)
                    } else {
                        Ok(b)
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            per_scale.push(short_term_graph(g, store, &batches, k, &c.short.encoder, c.options)?);
        }
        let short = fuse_scales_graph(g, store, &per_scale, c.short.fusion, Some(long))?;
        Ok((short, long))
    }

    /// Final video embeddings, `batch x dim`.
    pub fn embed_videos(&self, g: &mut Graph, store: &ParamStore, videos: &[&FrameFeatureSequence]) -> Result<Var> {
        let (s, l) = self.branches(g, store, videos)?;
        let v = fuse_video_graph(g, s, l, self.cfg.fusion)?;
        self.project(g, store, v, self.cfg.video_projection, VIDEO_PROJ)
    }

    /// Caption embeddings, `batch x dim`: identity unless the caption
    /// projection is enabled.
    pub fn embed_captions(&self, g: &mut Graph, store: &ParamStore, captions: &[&[f64]]) -> Result<Var> {
        let d = self.cfg.dim;
        let mut rows = Vec::with_capacity(captions.len() * d);
        for c in captions {
            if c.len() != d {
                return Err(Error::Contract(format!("caption has dim {}, model expects {d}", c.len())));
            }
            rows.extend_from_slice(c);
        }
        let x = g.constant(Tensor::matrix(captions.len(), d, rows));
        self.project(g, store, x, self.cfg.caption_projection, CAPTION_PROJ)
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var, enabled: bool, name: &str) -> Result<Var> {
        if !enabled {
            return Ok(x);
        }
        let w = g.param(store, name)?;
        let y = g.matmul(x, w);
        Ok(g.add(x, y))
    }

    /// Embeds videos without keeping a tape, in chunks.
    pub fn embed_videos_eval(&self, store: &ParamStore, videos: &[&FrameFeatureSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(64) {
            let mut g = Graph::new();
            let v = self.embed_videos(&mut g, store, chunk)?;
            out.extend(g.value(v).values().chunks(self.cfg.dim).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    pub fn embed_captions_eval(&self, store: &ParamStore, captions: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let c = self.embed_captions(&mut g, store, captions)?;
        Ok(g.value(c).values().chunks(self.cfg.dim).map(<[f64]>::to_vec).collect())
    }
}
