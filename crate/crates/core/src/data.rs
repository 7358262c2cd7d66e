//! Embedding datasets: the binary file formats, a synthetic generator and
//! batching.
//!
//! Embedding files (little-endian):
//!
//! ```text
//! "MSTDTEMB" | version u32 = 1 | kind u8 (0 video, 1 caption) | count u32
//! | n_max u32 (1 for captions) | dim u32
//! then per item: valid_count u32 | n_max * dim f32
//! ```
//!
//! Pair files: `"MSTDTPRS" | count u32 | (caption_idx u32, video_idx u32)*`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::temporal::FrameFeatureSequence;
use crate::tensor::Tensor;

pub const EMB_MAGIC: &[u8; 8] = b"MSTDTEMB";
pub const PAIR_MAGIC: &[u8; 8] = b"MSTDTPRS";
pub const EMB_VERSION: u32 = 1;

pub const VIDEO_FILE: &str = "videos.emb";
pub const CAPTION_FILE: &str = "captions.emb";
pub const PAIR_FILE: &str = "pairs.prs";

/// Videos, captions and the caption-to-video pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub videos: Vec<FrameFeatureSequence>,
    pub captions: Vec<Vec<f64>>,
    /// `(caption index, video index)`.
    pub pairs: Vec<(usize, usize)>,
    pub dim: usize,
    pub n_max: usize,
}

impl EmbeddingDataset {
    pub fn validate(&self) -> Result<()> {
        if self.videos.is_empty() || self.captions.is_empty() {
            return Err(Error::Format("dataset has no videos or no captions".into()));
        }
        if self.videos.iter().any(|v| v.dim() != self.dim || v.n_max() != self.n_max) {
            return Err(Error::Format("video shapes disagree with the dataset header".into()));
        }
        if self.captions.iter().any(|c| c.len() != self.dim) {
            return Err(Error::Format("caption dim disagrees with the video dim".into()));
        }
        let mut referenced = vec![false; self.videos.len()];
        for &(c, v) in &self.pairs {
            if c >= self.captions.len() || v >= self.videos.len() {
                return Err(Error::Format(format!(
                    "pair ({c}, {v}) out of range for {} captions and {} videos",
                    self.captions.len(),
                    self.videos.len()
                )));
            }
            referenced[v] = true;
        }
        if let Some(v) = referenced.iter().position(|r| !r) {
            return Err(Error::Format(format!("video {v} has no caption")));
        }
        Ok(())
    }

    /// Video index of every caption, in caption order. Fails if a caption is
    /// paired with zero or several videos.
    pub fn caption_owners(&self) -> Result<Vec<usize>> {
        let mut owner = vec![None; self.captions.len()];
        for &(c, v) in &self.pairs {
            if owner[c].replace(v).is_some_and(|prev| prev != v) {
                return Err(Error::Format(format!("caption {c} is paired with two videos")));
            }
        }
        owner
            .into_iter()
            .enumerate()
            .map(|(c, o)| o.ok_or_else(|| Error::Format(format!("caption {c} has no video"))))
            .collect()
    }

    /// Keeps the given videos (re-indexed in the given order) and their
    /// captions.
    pub fn subset(&self, videos: &[usize]) -> Result<Self> {
        let mut new_index = vec![None; self.videos.len()];
        for (i, &v) in videos.iter().enumerate() {
            new_index[v] = Some(i);
        }
        let mut captions = Vec::new();
        let mut pairs = Vec::new();
        for &(c, v) in &self.pairs {
            if let Some(nv) = new_index[v] {
                pairs.push((captions.len(), nv));
                captions.push(self.captions[c].clone());
            }
        }
        let ds = Self {
            videos: videos.iter().map(|&v| self.videos[v].clone()).collect(),
            captions,
            pairs,
            dim: self.dim,
            n_max: self.n_max,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Splits off the last `holdout` videos as a held-out set.
    pub fn split_tail(&self, holdout: usize) -> Result<(Self, Self)> {
        let n = self.videos.len();
        if holdout == 0 || holdout >= n {
            return Err(Error::Config(format!("cannot hold out {holdout} of {n} videos")));
        }
        let train: Vec<usize> = (0..n - holdout).collect();
        let test: Vec<usize> = (n - holdout..n).collect();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(VIDEO_FILE), encode_videos(&self.videos, self.n_max, self.dim))?;
        fs::write(dir.join(CAPTION_FILE), encode_captions(&self.captions, self.dim))?;
        fs::write(dir.join(PAIR_FILE), encode_pairs(&self.pairs))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        load_embeddings(&dir.join(VIDEO_FILE), &dir.join(CAPTION_FILE), &dir.join(PAIR_FILE))
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn header(kind: u8, count: usize, n_max: usize, dim: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&EMB_VERSION.to_le_bytes());
    buf.push(kind);
    push_u32(&mut buf, count);
    push_u32(&mut buf, n_max);
    push_u32(&mut buf, dim);
    buf
}

pub fn encode_videos(videos: &[FrameFeatureSequence], n_max: usize, dim: usize) -> Vec<u8> {
    let mut buf = header(0, videos.len(), n_max, dim);
    for v in videos {
        push_u32(&mut buf, v.valid_count());
        for &x in v.frames().values() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    buf
}

pub fn encode_captions(captions: &[Vec<f64>], dim: usize) -> Vec<u8> {
    let mut buf = header(1, captions.len(), 1, dim);
    for c in captions {
        push_u32(&mut buf, 1);
        for &x in c {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    buf
}

pub fn encode_pairs(pairs: &[(usize, usize)]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * pairs.len());
    buf.extend_from_slice(PAIR_MAGIC);
    push_u32(&mut buf, pairs.len());
    for &(c, v) in pairs {
        push_u32(&mut buf, c);
        push_u32(&mut buf, v);
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'a str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                Error::Format(format!("{}: truncated at byte {} (needed {n} more)", self.what, self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, want: &[u8; 8]) -> Result<()> {
        if self.take(8)? != want {
            return Err(Error::Format(format!("{}: bad magic", self.what)));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{}: {} trailing bytes", self.what, self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

struct EmbFile {
    n_max: usize,
    dim: usize,
    items: Vec<(usize, Vec<f64>)>,
}

fn decode_emb(buf: &[u8], want_kind: u8, what: &str) -> Result<EmbFile> {
    let mut r = Reader::new(buf, what);
    r.magic(EMB_MAGIC)?;
    let version = r.u32()?;
    if version != EMB_VERSION as usize {
        return Err(Error::Format(format!("{what}: unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != want_kind {
        return Err(Error::Format(format!("{what}: kind {kind}, expected {want_kind}")));
    }
    let (count, n_max, dim) = (r.u32()?, r.u32()?, r.u32()?);
    if n_max == 0 || dim == 0 || (kind == 1 && n_max != 1) {
        return Err(Error::Format(format!("{what}: invalid n_max {n_max} / dim {dim}")));
    }
    let mut items = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let valid = r.u32()?;
        if valid == 0 || valid > n_max {
            return Err(Error::Format(format!("{what}: item {i} has valid_count {valid} of {n_max}")));
        }
        let mut values = Vec::with_capacity(n_max * dim);
        for _ in 0..n_max * dim {
            values.push(f64::from(r.f32()?));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("{what}: item {i} holds non-finite values")));
        }
        items.push((valid, values));
    }
    r.finish()?;
    Ok(EmbFile { n_max, dim, items })
}

pub fn decode_pairs(buf: &[u8]) -> Result<Vec<(usize, usize)>> {
    let mut r = Reader::new(buf, "pairs");
    r.magic(PAIR_MAGIC)?;
    let count = r.u32()?;
    let pairs = (0..count).map(|_| Ok((r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(pairs)
}

pub fn decode_dataset(videos: &[u8], captions: &[u8], pairs: &[u8]) -> Result<EmbeddingDataset> {
    let v = decode_emb(videos, 0, "videos")?;
    let c = decode_emb(captions, 1, "captions")?;
    if v.dim != c.dim {
        return Err(Error::Format(format!("video dim {} but caption dim {}", v.dim, c.dim)));
    }
    let videos = v
        .items
        .into_iter()
        .map(|(valid, values)| FrameFeatureSequence::new(Tensor::matrix(v.n_max, v.dim, values), valid))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    let ds = EmbeddingDataset {
        videos,
        captions: c.items.into_iter().map(|(_, values)| values).collect(),
        pairs: decode_pairs(pairs)?,
        dim: v.dim,
        n_max: v.n_max,
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads the three files of a dataset. Values are promoted to `f64` and
/// padding rows are zeroed.
pub fn load_embeddings(video_path: &Path, caption_path: &Path, pairs_path: &Path) -> Result<EmbeddingDataset> {
    decode_dataset(&fs::read(video_path)?, &fs::read(caption_path)?, &fs::read(pairs_path)?)
}

/// Parameters of a synthetic dataset.
///
/// Each video belongs to cluster `video % cluster_count`. Frames are the
/// cluster centre plus per-video and per-frame Gaussian noise (each of norm
/// about `noise_sigma`); captions are the centre plus their own noise. With
/// `motion_signal`, clusters come in twins sharing a centre: the even twin
/// drifts forward along a shared motion direction over time, the odd twin
/// backward, and each twin's captions carry a matching motion code. Twins
/// therefore have equal frame means and only differ in frame-to-frame
/// deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_videos: usize,
    pub captions_per_video: usize,
    pub dim: usize,
    pub n_max: usize,
    pub cluster_count: usize,
    pub noise_sigma: f64,
    pub motion_signal: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 16,
            captions_per_video: 1,
            dim: 16,
            n_max: 12,
            cluster_count: 16,
            noise_sigma: 0.1,
            motion_signal: false,
        }
    }
}

/// Motion drift end to end, in units of the (unit-norm) cluster centres.
pub const MOTION_SPAN: f64 = 1.0;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.captions_per_video == 0 || self.dim == 0 || self.n_max == 0 {
            return Err(Error::Config("synthetic counts must be >= 1".into()));
        }
        if self.cluster_count == 0 || self.cluster_count > self.num_videos {
            return Err(Error::Config(format!(
                "cluster_count {} must lie in 1..={}",
                self.cluster_count, self.num_videos
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.motion_signal && (!self.cluster_count.is_multiple_of(2) || self.n_max < 2) {
            return Err(Error::Config("motion_signal needs an even cluster_count and n_max >= 2".into()));
        }
        Ok(())
    }

    /// Cluster of a video and, with motion on, its drift sign.
    pub fn cluster_of(&self, video: usize) -> usize {
        video % self.cluster_count
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Deterministic synthetic dataset; see [`SynthSpec`].
pub fn generate_synthetic(spec: &SynthSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, n) = (spec.dim, spec.n_max);
    let per_unit = 1.0 / (d as f64).sqrt();
    let motion_dir = unit(&mut rng, d);
    let caption_codes = [unit(&mut rng, d), unit(&mut rng, d)];
    let distinct = if spec.motion_signal { spec.cluster_count / 2 } else { spec.cluster_count };
    let bases: Vec<Vec<f64>> = (0..distinct).map(|_| unit(&mut rng, d)).collect();
    let center = |c: usize| if spec.motion_signal { &bases[c / 2] } else { &bases[c] };

    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut captions = Vec::with_capacity(spec.num_videos * spec.captions_per_video);
    let mut pairs = Vec::with_capacity(spec.num_videos * spec.captions_per_video);
    for v in 0..spec.num_videos {
        let c = spec.cluster_of(v);
        let identity = add(center(c), &gaussian(&mut rng, d, spec.noise_sigma * per_unit));
        let valid = if spec.motion_signal { n } else { rng.random_range(n.div_ceil(2)..=n) };
        let sign = if c.is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut frames = vec![0.0; n * d];
        for t in 0..valid {
            let mut row = add(&identity, &gaussian(&mut rng, d, spec.noise_sigma * per_unit));
            if spec.motion_signal {
                let phase = MOTION_SPAN * (t as f64 / (n - 1) as f64 - 0.5) * sign;
                row.iter_mut().zip(&motion_dir).for_each(|(x, m)| *x += phase * m);
            }
            frames[t * d..(t + 1) * d].copy_from_slice(&row);
        }
        videos.push(FrameFeatureSequence::new(Tensor::matrix(n, d, frames), valid)?);
        for _ in 0..spec.captions_per_video {
            let mut cap = add(center(c), &gaussian(&mut rng, d, spec.noise_sigma * per_unit));
            if spec.motion_signal {
                cap = add(&cap, &caption_codes[c % 2]);
            }
            pairs.push((captions.len(), v));
            captions.push(cap);
        }
    }
    let ds = EmbeddingDataset { videos, captions, pairs, dim: d, n_max: n };
    ds.validate()?;
    Ok(ds)
}

/// Seeded shuffle of the pairs into batches holding each video at most once.
///
/// Pairs are taken in shuffled order; a pair whose video is already in the
/// open batch waits for a later one. Batches of fewer than two pairs are
/// always dropped, and with `drop_last` any batch below `batch_size` too.
pub fn make_batches(ds: &EmbeddingDataset, batch_size: usize, seed: u64, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch_size {batch_size} must be at least 2")));
    }
    let mut order: Vec<usize> = (0..ds.pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pending = order;
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = std::collections::HashSet::new();
        let mut rest = Vec::with_capacity(pending.len());
        for p in pending {
            if batch.len() < batch_size && seen.insert(ds.pairs[p].1) {
                batch.push(p);
            } else {
                rest.push(p);
            }
        }
        pending = rest;
        let keep = batch.len() >= 2 && (!drop_last || batch.len() == batch_size);
        if keep {
            batches.push(batch);
        } else if batch.len() < batch_size {
            // nothing more can fill a batch
            break;
        }
    }
    Ok(batches)
}
