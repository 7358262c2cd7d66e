//! Brute-force evaluators shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use mstdt::eval::TieBreak;
use mstdt::objective::{KlReduction, LossParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn brute_cosine(x: &[Vec<f64>], y: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; y.len()]; x.len()];
    for i in 0..x.len() {
        for j in 0..y.len() {
            let mut dot = 0.0;
            let mut nx = 0.0;
            let mut ny = 0.0;
            for k in 0..x[i].len() {
                dot += x[i][k] * y[j][k];
                nx += x[i][k] * x[i][k];
                ny += y[j][k] * y[j][k];
            }
            out[i][j] = dot / (nx.sqrt() * ny.sqrt());
        }
    }
    out
}

/// log of softmax over `logits`, computed directly from the definition.
pub fn brute_log_softmax(logits: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut total = 0.0;
    for &l in logits {
        total += (l - max).exp();
    }
    logits.iter().map(|&l| l - max - total.ln()).collect()
}

pub fn brute_kl(logp: &[f64], logq: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..logp.len() {
        kl += logp[i].exp() * (logp[i] - logq[i]);
    }
    kl
}

/// Off-diagonal row `i` (or column when `by_col`) of `m`, scaled.
pub fn off_diag(m: &[Vec<f64>], i: usize, by_col: bool, scale: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for j in 0..m.len() {
        if j != i {
            out.push(scale * if by_col { m[j][i] } else { m[i][j] });
        }
    }
    out
}

pub fn brute_bs(vc: &[Vec<f64>], vv: &[Vec<f64>], cc: &[Vec<f64>], lp: &LossParams) -> f64 {
    let b = vc.len();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let p = brute_log_softmax(&off_diag(vc, i, false, lp.logit_scale));
        let q = brute_log_softmax(&off_diag(vv, i, false, lp.logit_scale));
        rows += if lp.kl_swap { brute_kl(&q, &p) } else { brute_kl(&p, &q) };
        let p = brute_log_softmax(&off_diag(vc, i, true, lp.logit_scale));
        let q = brute_log_softmax(&off_diag(cc, i, true, lp.logit_scale));
        cols += if lp.kl_swap { brute_kl(&q, &p) } else { brute_kl(&p, &q) };
    }
    match lp.kl_reduction {
        KlReduction::Mean => rows / b as f64 + cols / b as f64,
        KlReduction::Sum => rows + cols,
    }
}

pub fn brute_ce(vc: &[Vec<f64>], scale: f64) -> f64 {
    let b = vc.len();
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| scale * vc[i][j]).collect();
        rows -= brute_log_softmax(&row)[i];
        let col: Vec<f64> = (0..b).map(|j| scale * vc[j][i]).collect();
        cols -= brute_log_softmax(&col)[i];
    }
    rows / b as f64 + cols / b as f64
}

pub fn random_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<Vec<f64>> {
    (0..b).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Sorts every candidate by descending score, placing the truth first
/// (optimistic) or last (pessimistic) among equal scores, and returns its
/// 1-based position.
pub fn sort_rank(scores: &[f64], truth: usize, tie: TieBreak) -> usize {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then_with(|| {
            let key = |i: usize| match tie {
                TieBreak::Optimistic => i != truth,
                TieBreak::Pessimistic => i == truth,
            };
            key(a).cmp(&key(b))
        })
    });
    order.iter().position(|&i| i == truth).unwrap() + 1
}
