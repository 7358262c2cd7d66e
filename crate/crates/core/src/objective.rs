//! Cosine similarity matrices and the training objective: a symmetric
//! cross entropy over the cross-modal matrix plus a KL term that aligns the
//! off-diagonal similarity structure of the cross-modal matrix with each
//! intra-modal one.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entity {
    Video,
    Caption,
}

/// Cosine similarities between two batches, rows against columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub row_entities: Entity,
    pub col_entities: Entity,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, row_entities: Entity, col_entities: Entity) -> Result<Self> {
        if values.shape().len() != 2 || values.is_empty() {
            return Err(Error::Contract("similarity matrix must be a non-empty matrix".into()));
        }
        Ok(Self { values, row_entities, col_entities })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values.at(r, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlReduction {
    /// Average the per-row divergences.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub beta: f64,
    pub logit_scale: f64,
    /// Use KL(intra || cross) instead of KL(cross || intra).
    pub kl_swap: bool,
    pub kl_reduction: KlReduction,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { beta: 0.3, logit_scale: 100.0, kl_swap: false, kl_reduction: KlReduction::Mean }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config(format!("logit_scale {} must be positive", self.logit_scale)));
        }
        Ok(())
    }
}

/// `rows(a) . rows(b)^T` after scaling every row to unit length.
pub fn cosine_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a).1 != g.shape(b).1 {
        return Err(Error::Contract("cosine operands differ in width".into()));
    }
    let an = g.normalize_rows(a)?;
    let bn = if a == b { an } else { g.normalize_rows(b)? };
    let bt = g.transpose(bn);
    Ok(g.matmul(an, bt))
}

pub fn cosine_similarity_matrix(x: &Tensor, y: &Tensor, rows: Entity, cols: Entity) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let b = g.constant(y.clone());
    let s = cosine_graph(&mut g, a, b)?;
    SimilarityMatrix::new(g.value(s).clone(), rows, cols)
}

fn off_diagonal(b: usize) -> Vec<bool> {
    (0..b * b).map(|i| i / b != i % b).collect()
}

/// Mean (or sum) over rows of KL(p_row || q_row), both distributions taken
/// over the off-diagonal entries of the given logit rows.
fn row_kl(g: &mut Graph, p_logits: Var, q_logits: Var, reduction: KlReduction) -> Result<Var> {
    let b = g.shape(p_logits).0;
    let mask = off_diagonal(b);
    let p = g.softmax_rows(p_logits, mask.clone(), false)?;
    let log_p = g.softmax_rows(p_logits, mask.clone(), true)?;
    let log_q = g.softmax_rows(q_logits, mask, true)?;
    let diff = g.sub(log_p, log_q);
    let terms = g.mul(p, diff);
    let total = g.sum(terms);
    Ok(match reduction {
        KlReduction::Mean => g.scale(total, 1.0 / b as f64),
        KlReduction::Sum => total,
    })
}

fn check_square(g: &Graph, vars: &[Var], min: usize) -> Result<usize> {
    let (b, c) = g.shape(vars[0]);
    if b != c || vars.iter().any(|&v| g.shape(v) != (b, b)) {
        return Err(Error::Contract("similarity matrices must be square and equal in size".into()));
    }
    if b < min {
        return Err(Error::Contract(format!("batch of {b} is below the minimum of {min}")));
    }
    Ok(b)
}

/// Binary similarity loss on the tape.
///
/// Row term compares the row distributions of `vc` and `vv`, column term the
/// column distributions of `vc` and `cc`; diagonal entries are excluded
/// before the softmax.
pub fn binary_similarity_graph(g: &mut Graph, vc: Var, vv: Var, cc: Var, lp: &LossParams) -> Result<Var> {
    check_square(g, &[vc, vv, cc], 2)?;
    let s = lp.logit_scale;
    let vc_s = g.scale(vc, s);
    let vv_s = g.scale(vv, s);
    let cc_s = g.scale(cc, s);
    let vc_t = g.transpose(vc_s);
    let cc_t = g.transpose(cc_s);
    let (row, col) = if lp.kl_swap {
        (row_kl(g, vv_s, vc_s, lp.kl_reduction)?, row_kl(g, cc_t, vc_t, lp.kl_reduction)?)
    } else {
        (row_kl(g, vc_s, vv_s, lp.kl_reduction)?, row_kl(g, vc_t, cc_t, lp.kl_reduction)?)
    };
    Ok(g.add(row, col))
}

/// Symmetric cross entropy with the diagonal as ground truth.
pub fn symmetric_cross_entropy_graph(g: &mut Graph, vc: Var, logit_scale: f64) -> Result<Var> {
    let b = check_square(g, &[vc], 1)?;
    let eye = g.constant(Tensor::matrix(b, b, (0..b * b).map(|i| f64::from(u8::from(i / b == i % b))).collect()));
    let logits = g.scale(vc, logit_scale);
    let rows = g.softmax_rows(logits, vec![true; b * b], true)?;
    let lt = g.transpose(logits);
    let cols = g.softmax_rows(lt, vec![true; b * b], true)?;
    let both = g.add(rows, cols);
    let diag = g.mul(both, eye);
    let total = g.sum(diag);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// `beta * L_bs + (1 - beta) * L_ce`. A zero-weighted term is not built, so
/// `beta = 0` also works for a single pair.
pub fn total_loss_graph(g: &mut Graph, vc: Var, vv: Var, cc: Var, lp: &LossParams) -> Result<Var> {
    lp.validate()?;
    let ce = (lp.beta < 1.0).then(|| symmetric_cross_entropy_graph(g, vc, lp.logit_scale)).transpose()?;
    let bs = (lp.beta > 0.0).then(|| binary_similarity_graph(g, vc, vv, cc, lp)).transpose()?;
    Ok(match (bs, ce) {
        (Some(bs), None) => bs,
        (None, Some(ce)) => ce,
        (Some(bs), Some(ce)) => {
            let a = g.scale(bs, lp.beta);
            let b = g.scale(ce, 1.0 - lp.beta);
            g.add(a, b)
        }
        (None, None) => unreachable!("beta is in [0, 1]"),
    })
}

/// Loss of a batch of paired video and caption embeddings (`b x dim` each).
pub fn batch_loss(g: &mut Graph, videos: Var, captions: Var, lp: &LossParams) -> Result<Var> {
    if g.shape(videos) != g.shape(captions) {
        return Err(Error::Contract("video and caption batches differ in shape".into()));
    }
    let vc = cosine_graph(g, videos, captions)?;
    let needs_intra = lp.beta > 0.0;
    let (vv, cc) =
        if needs_intra { (cosine_graph(g, videos, videos)?, cosine_graph(g, captions, captions)?) } else { (vc, vc) };
    total_loss_graph(g, vc, vv, cc, lp)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).values()[0]
}

pub fn binary_similarity_loss(
    sim_vc: &SimilarityMatrix,
    sim_vv: &SimilarityMatrix,
    sim_cc: &SimilarityMatrix,
    lp: &LossParams,
) -> Result<f64> {
    let mut g = Graph::new();
    let vc = g.constant(sim_vc.values.clone());
    let vv = g.constant(sim_vv.values.clone());
    let cc = g.constant(sim_cc.values.clone());
    let l = binary_similarity_graph(&mut g, vc, vv, cc, lp)?;
    Ok(scalar(&g, l))
}

pub fn symmetric_cross_entropy(sim_vc: &SimilarityMatrix, logit_scale: f64) -> Result<f64> {
    let mut g = Graph::new();
    let vc = g.constant(sim_vc.values.clone());
    let l = symmetric_cross_entropy_graph(&mut g, vc, logit_scale)?;
    Ok(scalar(&g, l))
}

pub fn total_loss(
    sim_vc: &SimilarityMatrix,
    sim_vv: &SimilarityMatrix,
    sim_cc: &SimilarityMatrix,
    lp: &LossParams,
) -> Result<f64> {
    let mut g = Graph::new();
    let vc = g.constant(sim_vc.values.clone());
    let vv = g.constant(sim_vv.values.clone());
    let cc = g.constant(sim_cc.values.clone());
    let l = total_loss_graph(&mut g, vc, vv, cc, lp)?;
    Ok(scalar(&g, l))
}
