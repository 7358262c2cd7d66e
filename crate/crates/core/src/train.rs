//! Training loop, evaluation and run history.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::save_checkpoint;
use crate::config::{OptimConfig, RunConfig};
use crate::data::{generate_synthetic, make_batches, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate_scores, EvalSummary, TieBreak};
use crate::model::{is_projection_param, Mstdt};
use crate::objective::batch_loss;
use crate::temporal::FrameFeatureSequence;
use crate::tensor::ParamStore;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.json";
pub const CONFIG_FILE: &str = "config.txt";

/// Adam over every parameter of a store, with the projection group and
/// the temporal group on separate base rates.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Self { cfg, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update with both base rates multiplied by `lr_factor`.
    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, lr_factor: f64) {
        self.t += 1;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (name, p)) in store.iter_mut().enumerate() {
            let base = if is_projection_param(name) { c.lr_backbone } else { c.lr_temporal };
            let lr = base * lr_factor;
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.values_mut().iter_mut().zip(&grad).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                *w -= lr * (m[j] / bias1) / ((v[j] / bias2).sqrt() + c.eps);
            }
        }
    }
}

/// Cosine decay from 1 at step 0 to 0 at `horizon`, and 0 after it.
pub fn cosine_factor(step: usize, horizon: usize) -> f64 {
    if horizon == 0 || step >= horizon {
        return 0.0;
    }
    0.5 * (1.0 + (PI * step as f64 / horizon as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr_factor: f64,
}

/// Validation after `epoch` epochs; epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps_done: usize,
    /// Mean training loss over the epoch's steps; `None` for epoch 0.
    pub train_loss: Option<f64>,
    pub validation: EvalSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("history serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("history: {e}")))
    }

    /// Human-readable summary: one line per epoch plus the final step.
    pub fn report(&self) -> String {
        let mut out = String::from("epoch  steps  train_loss  t2v_r1  v2t_r1  t2v_medr  rsum\n");
        for e in &self.epochs {
            let loss = e.train_loss.map_or("-".to_string(), |l| format!("{l:.6}"));
            out.push_str(&format!(
                "{:>5}  {:>5}  {:>10}  {:>6.2}  {:>6.2}  {:>8.1}  {:.2}\n",
                e.epoch,
                e.steps_done,
                loss,
                e.validation.t2v.r1,
                e.validation.v2t.r1,
                e.validation.t2v.med_r,
                e.validation.rsum
            ));
        }
        if let Some(last) = self.steps.last() {
            out.push_str(&format!("final step {} loss {:.6}\n", last.step, last.loss));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mstdt,
    pub params: ParamStore,
    pub history: History,
}

/// The configured dataset: loaded from `cfg.data`, or generated.
pub fn load_dataset(cfg: &RunConfig) -> Result<EmbeddingDataset> {
    let ds = match &cfg.data {
        Some(dir) => EmbeddingDataset::load_dir(dir)?,
        None => generate_synthetic(&cfg.synth)?,
    };
    if ds.dim != cfg.model.dim || ds.n_max != cfg.model.n_max {
        return Err(Error::Contract(format!(
            "dataset is {}x{}, config expects n_max {} and dim {}",
            ds.n_max, ds.dim, cfg.model.n_max, cfg.model.dim
        )));
    }
    Ok(ds)
}

/// Training and validation sets; with `val_videos = 0` both are the full
/// dataset.
pub fn split_dataset(cfg: &RunConfig, ds: &EmbeddingDataset) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    if cfg.val_videos == 0 {
        Ok((ds.clone(), ds.clone()))
    } else {
        ds.split_tail(cfg.val_videos)
    }
}

/// Retrieval metrics of `params` on every pair of `ds`.
pub fn evaluate(model: &Mstdt, params: &ParamStore, ds: &EmbeddingDataset, tie: TieBreak) -> Result<EvalSummary> {
    model.check_params(params)?;
    if ds.dim != model.config().dim || ds.n_max != model.config().n_max {
        return Err(Error::Contract(format!(
            "dataset is {}x{}, model expects n_max {} and dim {}",
            ds.n_max,
            ds.dim,
            model.config().n_max,
            model.config().dim
        )));
    }
    let videos: Vec<_> = ds.videos.iter().collect();
    let captions: Vec<&[f64]> = ds.captions.iter().map(Vec::as_slice).collect();
    let v = unit_rows(model.embed_videos_eval(params, &videos)?)?;
    let c = unit_rows(model.embed_captions_eval(params, &captions)?)?;
    let scores: Vec<Vec<f64>> =
        v.iter().map(|vr| c.iter().map(|cr| vr.iter().zip(cr).map(|(a, b)| a * b).sum()).collect()).collect();
    evaluate_scores(&scores, &ds.caption_owners()?, tie)
}

fn unit_rows(rows: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    rows.into_iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 1e-12 && n.is_finite()) {
                return Err(Error::Numeric(format!("embedding norm {n} cannot be normalized")));
            }
            Ok(r.into_iter().map(|x| x / n).collect())
        })
        .collect()
}

fn batch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1)
}

/// Trains per `cfg`. With `out` set, writes the config, a checkpoint after
/// initialisation and after every epoch, and the history.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let (train_set, val_set) = split_dataset(cfg, &ds)?;
    let model = Mstdt::new(cfg.model.clone())?;
    let mut params = model.init_params(cfg.init, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut adam = Adam::new(cfg.optim, &params);

    let epoch_batches = (0..cfg.epochs)
        .map(|e| make_batches(&train_set, cfg.batch_size, batch_seed(cfg.seed, e), cfg.drop_last))
        .collect::<Result<Vec<_>>>()?;
    let mut total: usize = epoch_batches.iter().map(Vec::len).sum();
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let horizon = if cfg.optim.cosine_steps > 0 { cfg.optim.cosine_steps } else { total };

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    }
    let mut history = History::default();
    let baseline = evaluate(&model, &params, &val_set, cfg.tie)?;
    history.epochs.push(EpochRecord { epoch: 0, steps_done: 0, train_loss: None, validation: baseline });
    write_outputs(out, &params, &history)?;

    let mut step = 0;
    'epochs: for (e, batches) in epoch_batches.iter().enumerate() {
        let mut losses = Vec::with_capacity(batches.len());
        for batch in batches {
            if step >= total {
                break;
            }
            let videos: Vec<_> = batch.iter().map(|&p| &train_set.videos[train_set.pairs[p].1]).collect();
            let captions: Vec<&[f64]> =
                batch.iter().map(|&p| train_set.captions[train_set.pairs[p].0].as_slice()).collect();
            let value = train_step(&model, &mut params, &videos, &captions, cfg).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("at step {step}: {m}")),
                Error::AllMasked(m) => Error::AllMasked(format!("at step {step}: {m}")),
                other => other,
            })?;
            let lr_factor = cosine_factor(step, horizon);
            adam.step(&mut params, lr_factor);
            history.steps.push(StepRecord { step, epoch: e + 1, loss: value, lr_factor });
            losses.push(value);
            step += 1;
        }
        if losses.is_empty() {
            break 'epochs;
        }
        params.zero_grad();
        let validation = evaluate(&model, &params, &val_set, cfg.tie)?;
        let train_loss = Some(losses.iter().sum::<f64>() / losses.len() as f64);
        history.epochs.push(EpochRecord { epoch: e + 1, steps_done: step, train_loss, validation });
        write_outputs(out, &params, &history)?;
    }
    Ok(TrainOutcome { model, params, history })
}

/// Forward and backward pass on one batch; returns the loss.
fn train_step(
    model: &Mstdt,
    params: &mut ParamStore,
    videos: &[&FrameFeatureSequence],
    captions: &[&[f64]],
    cfg: &RunConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = model.embed_videos(&mut g, params, videos)?;
    let c = model.embed_captions(&mut g, params, captions)?;
    let loss = batch_loss(&mut g, v, c, &cfg.loss)?;
    let value = g.value(loss).values()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss became {value}")));
    }
    params.zero_grad();
    g.backward(loss, params)?;
    Ok(value)
}

fn write_outputs(out: Option<&Path>, params: &ParamStore, history: &History) -> Result<()> {
    if let Some(dir) = out {
        save_checkpoint(params, &dir.join(CHECKPOINT_FILE))?;
        fs::write(dir.join(HISTORY_FILE), history.to_json())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_factor(0, 10), 1.0);
        assert!((cosine_factor(5, 10) - 0.5).abs() < 1e-15);
        assert_eq!(cosine_factor(10, 10), 0.0);
        assert_eq!(cosine_factor(3, 0), 0.0);
    }
}
