//! Central finite-difference check of every parameter gradient of the
//! total loss on one batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::data::{make_batches, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::model::{is_projection_param, Mstdt};
use crate::objective::batch_loss;
use crate::tensor::ParamStore;
use crate::train::load_dataset;

/// Finite-difference step of the fourth-order central stencil.
pub const FD_STEP: f64 = 1e-3;

/// Gradients whose largest entry stays below this are compared in absolute
/// terms.
pub const ABS_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEntry {
    pub name: String,
    pub group: String,
    pub values: usize,
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|, ABS_FLOOR)`.
    pub rel_error: f64,
    pub abs_error: f64,
    pub max_analytic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub batch: usize,
    pub loss: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.rel_error)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.rel_error <= tolerance)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("batch {} loss {:.12}\n", self.batch, self.loss);
        for e in &self.entries {
            out.push_str(&format!(
                "{:<32} {:<8} n={:<5} rel={:.3e} abs={:.3e} max|g|={:.3e}\n",
                e.name, e.group, e.values, e.rel_error, e.abs_error, e.max_analytic
            ));
        }
        if let Some(w) = self.worst() {
            out.push_str(&format!("worst {} rel={:.3e}\n", w.name, w.rel_error));
        }
        out
    }
}

/// Checks `params` on the first batch of `ds` (pairs in shuffled order).
pub fn grad_check_params(
    model: &Mstdt,
    params: &ParamStore,
    ds: &EmbeddingDataset,
    cfg: &RunConfig,
) -> Result<GradReport> {
    let batch = make_batches(ds, cfg.batch_size, cfg.seed, false)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Config("dataset yields no batch".into()))?;
    let videos: Vec<_> = batch.iter().map(|&p| &ds.videos[ds.pairs[p].1]).collect();
    let captions: Vec<&[f64]> = batch.iter().map(|&p| ds.captions[ds.pairs[p].0].as_slice()).collect();
    let loss_of = |store: &ParamStore| -> Result<(Graph, crate::autograd::Var)> {
        let mut g = Graph::new();
        let v = model.embed_videos(&mut g, store, &videos)?;
        let c = model.embed_captions(&mut g, store, &captions)?;
        let loss = batch_loss(&mut g, v, c, &cfg.loss)?;
        Ok((g, loss))
    };

    let mut analytic = params.clone();
    analytic.zero_grad();
    let (g, loss) = loss_of(&analytic)?;
    let loss_value = g.value(loss).values()[0];
    g.backward(loss, &mut analytic)?;

    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let a: Vec<f64> = analytic
            .get(&name)
            .and_then(|t| t.grad().map(<[f64]>::to_vec))
            .unwrap_or_else(|| vec![0.0; params.get(&name).map_or(0, |t| t.len())]);
        let mut numeric = vec![0.0; a.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = params.get(&name).expect("listed").values()[i];
            let mut eval_at = |w: f64| -> Result<f64> {
                probe.get_mut(&name).expect("listed").values_mut()[i] = w;
                let (g, l) = loss_of(&probe)?;
                Ok(g.value(l).values()[0])
            };
            let h = FD_STEP;
            let (p2, p1) = (eval_at(orig + 2.0 * h)?, eval_at(orig + h)?);
            let (m1, m2) = (eval_at(orig - h)?, eval_at(orig - 2.0 * h)?);
            eval_at(orig)?;
            *n = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
        }
        let max_a = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let max_n = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let abs_error = a.iter().zip(&numeric).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        entries.push(GradEntry {
            group: if is_projection_param(&name) { "backbone" } else { "temporal" }.to_string(),
            values: a.len(),
            rel_error: abs_error / max_a.max(max_n).max(ABS_FLOOR),
            abs_error,
            max_analytic: max_a,
            name,
        });
    }
    Ok(GradReport { batch: batch.len(), loss: loss_value, entries })
}

/// Fresh parameters from `cfg.seed`, checked on the configured dataset.
pub fn grad_check(cfg: &RunConfig) -> Result<GradReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let model = Mstdt::new(cfg.model.clone())?;
    let params = model.init_params(cfg.init, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    grad_check_params(&model, &params, &ds, cfg)
}
