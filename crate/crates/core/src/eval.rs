//! Rank-based retrieval metrics: R@1/5/10, median and mean rank, Rsum.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Entity, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Caption queries over video candidates.
    T2v,
    /// Video queries over caption candidates.
    V2t,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieBreak {
    /// Candidates scoring equal to the true match do not push it down.
    #[default]
    Optimistic,
    Pessimistic,
}

impl std::str::FromStr for TieBreak {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimistic" => Ok(Self::Optimistic),
            "pessimistic" => Ok(Self::Pessimistic),
            other => Err(Error::Config(format!("unknown tie rule {other:?}"))),
        }
    }
}

fn rank_among(truth: f64, others: impl Iterator<Item = f64>, tie: TieBreak) -> usize {
    1 + others
        .filter(|&s| match tie {
            TieBreak::Optimistic => s > truth,
            TieBreak::Pessimistic => s >= truth,
        })
        .count()
}

/// 1-based rank of the diagonal match for every query of a square matrix.
///
/// For `V2t` the queries are the video-side entities, for `T2v` the caption
/// side; the matrix orientation is read from its entity labels (a matrix
/// with two video or two caption axes is read as videos on rows).
pub fn rank_of_truth(sim: &SimilarityMatrix, direction: Direction, tie: TieBreak) -> Result<Vec<usize>> {
    let b = sim.rows();
    if sim.cols() != b {
        return Err(Error::Contract("rank_of_truth needs a square matrix".into()));
    }
    let videos_on_rows = !(sim.row_entities == Entity::Caption && sim.col_entities == Entity::Video);
    let queries_on_rows = videos_on_rows == (direction == Direction::V2t);
    Ok((0..b)
        .map(|q| {
            if queries_on_rows {
                let truth = sim.at(q, q);
                rank_among(truth, (0..b).filter(|&j| j != q).map(|j| sim.at(q, j)), tie)
            } else {
                let truth = sim.at(q, q);
                rank_among(truth, (0..b).filter(|&i| i != q).map(|i| sim.at(i, q)), tie)
            }
        })
        .collect())
}

/// Ranks for datasets where a video may own several captions.
///
/// `scores[v][c]` is the similarity of video `v` and caption `c`;
/// `caption_video[c]` is the video caption `c` describes. For `T2v` there is
/// one query per caption; for `V2t` one query per video, scored by the best
/// ranked of its captions.
pub fn ranks_for_pairs(
    scores: &[Vec<f64>],
    caption_video: &[usize],
    direction: Direction,
    tie: TieBreak,
) -> Result<Vec<usize>> {
    let nv = scores.len();
    let nc = caption_video.len();
    if scores.iter().any(|r| r.len() != nc) {
        return Err(Error::Contract("score rows must cover every caption".into()));
    }
    if caption_video.iter().any(|&v| v >= nv) {
        return Err(Error::Contract("caption points at a missing video".into()));
    }
    match direction {
        Direction::T2v => Ok((0..nc)
            .map(|c| {
                let truth = scores[caption_video[c]][c];
                rank_among(truth, (0..nv).filter(|&v| v != caption_video[c]).map(|v| scores[v][c]), tie)
            })
            .collect()),
        Direction::V2t => (0..nv)
            .map(|v| {
                (0..nc)
                    .filter(|&c| caption_video[c] == v)
                    .map(|c| {
                        let truth = scores[v][c];
                        let others = (0..nc).filter(|&o| caption_video[o] != v).map(|o| scores[v][o]);
                        rank_among(truth, others, tie)
                    })
                    .min()
                    .ok_or_else(|| Error::Contract(format!("video {v} has no caption")))
            })
            .collect(),
    }
}

/// Metrics for one retrieval direction. Recalls are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub med_r: f64,
    pub mean_r: f64,
    pub r_sum: f64,
    pub queries: usize,
}

impl RetrievalReport {
    pub fn r_at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }
}

pub fn retrieval_metrics(ranks: &[usize], direction: Direction) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::Contract("no ranks to summarize".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let med_r = if sorted.len() % 2 == 1 { sorted[mid] as f64 } else { (sorted[mid - 1] + sorted[mid]) as f64 / 2.0 };
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    Ok(RetrievalReport {
        direction,
        r1,
        r5,
        r10,
        med_r,
        mean_r: ranks.iter().sum::<usize>() as f64 / n,
        r_sum: r1 + r5 + r10,
        queries: ranks.len(),
    })
}

/// Both directions plus their combined Rsum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub t2v: RetrievalReport,
    pub v2t: RetrievalReport,
    pub rsum: f64,
}

impl EvalSummary {
    pub fn new(t2v: RetrievalReport, v2t: RetrievalReport) -> Self {
        let rsum = t2v.r_sum + v2t.r_sum;
        Self { t2v, v2t, rsum }
    }

    /// Flat `key = value` lines, e.g. `t2v.r1 = 100.0000`.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for r in [&self.t2v, &self.v2t] {
            let d = r.direction.as_str();
            for (key, value) in
                [("r1", r.r1), ("r5", r.r5), ("r10", r.r10), ("medr", r.med_r), ("meanr", r.mean_r), ("rsum", r.r_sum)]
            {
                let _ = writeln!(out, "{d}.{key} = {value:.4}");
            }
            let _ = writeln!(out, "{d}.queries = {}", r.queries);
        }
        let _ = writeln!(out, "rsum = {:.4}", self.rsum);
        out
    }

    /// JSON with one record per direction and the combined Rsum.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Evaluates both directions from a `videos x captions` score table.
pub fn evaluate_scores(scores: &[Vec<f64>], caption_video: &[usize], tie: TieBreak) -> Result<EvalSummary> {
    let t2v = retrieval_metrics(&ranks_for_pairs(scores, caption_video, Direction::T2v, tie)?, Direction::T2v)?;
    let v2t = retrieval_metrics(&ranks_for_pairs(scores, caption_video, Direction::V2t, tie)?, Direction::V2t)?;
    Ok(EvalSummary::new(t2v, v2t))
}
