//! Score fusion, ranking and recall metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::featurepack::FeaturePack;
use crate::model::{similarity_matrices, PrvrModel};

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const RECALL_KS: [usize; 4] = [1, 5, 10, 100];

/// `α·S_m + (1−α)·S_v`
pub fn fused_similarity(s_m: f64, s_v: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * s_m + (1.0 - alpha) * s_v)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

pub fn fuse_matrices(s_m: &Array2<f64>, s_v: &Array2<f64>, alpha: f64) -> Result<Array2<f64>> {
    check_alpha(alpha)?;
    if s_m.dim() != s_v.dim() {
        return Err(Error::ShapeMismatch {
            what: "similarity matrices".into(),
            message: format!("{:?} vs {:?}", s_m.dim(), s_v.dim()),
        });
    }
    Ok(s_m * alpha + s_v * (1.0 - alpha))
}

/// Descending score, then ascending video id. Scores must be finite.
fn rank_order(scores: &[f64], ids: &[String], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then_with(|| ids[a].cmp(&ids[b]))
}

/// 1-based rank of `target` among all videos.
pub fn rank_of_target(scores: &[f64], ids: &[String], target: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| rank_order(scores, ids, j, target) == Ordering::Less)
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// `(video_id, fused score)`, best first.
    pub ranking: Vec<(String, f64)>,
    pub rank_of_target: usize,
}

pub fn rank_videos(scores: &[f64], ids: &[String]) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| rank_order(scores, ids, a, b));
    order.into_iter().map(|j| (ids[j].clone(), scores[j])).collect()
}

/// Recalls in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@5")]
    pub r5: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R@100")]
    pub r100: f64,
    #[serde(rename = "SumR")]
    pub sum_r: f64,
    pub num_queries: usize,
}

impl MetricReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::InvalidInput("no queries to evaluate".into()));
        }
        let n = ranks.len() as f64;
        let [r1, r5, r10, r100] = RECALL_KS.map(|k| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n);
        Ok(MetricReport {
            r1,
            r5,
            r10,
            r100,
            sum_r: r1 + r5 + r10 + r100,
            num_queries: ranks.len(),
        })
    }

    pub fn recalls(&self) -> [f64; 4] {
        [self.r1, self.r5, self.r10, self.r100]
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>7} {:>7} {:>7}",
            "R@1", "R@5", "R@10", "R@100", "SumR"
        );
        let _ = writeln!(
            s,
            "{:>7.1} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
            self.r1, self.r5, self.r10, self.r100, self.sum_r
        );
        s
    }
}

/// Ranks of the targets under a `queries × videos` score matrix.
pub fn target_ranks(scores: &Array2<f64>, ids: &[String], targets: &[usize]) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("empty score matrix".into()));
    }
    if scores.ncols() != ids.len() || scores.nrows() != targets.len() {
        return Err(Error::ShapeMismatch {
            what: "score matrix".into(),
            message: format!(
                "{:?} for {} videos and {} queries",
                scores.dim(),
                ids.len(),
                targets.len()
            ),
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    Ok(scores
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &t)| rank_of_target(row.as_slice().expect("standard layout"), ids, t))
        .collect())
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub results: Vec<RetrievalResult>,
}

/// Per-query similarity matrices for a pack: `(S_v, S_m, keys)`.
pub fn pack_similarities<F: Scalar>(
    model: &PrvrModel<F>,
    pack: &FeaturePack,
) -> Result<(Array2<f64>, Array2<f64>, Array2<usize>)> {
    if pack.videos.is_empty() || pack.queries.is_empty() {
        return Err(Error::InvalidInput(
            "evaluation needs at least one video and one query".into(),
        ));
    }
    let videos: Vec<_> = pack.videos.iter().map(|v| &v.frames).collect();
    let queries: Vec<_> = pack.queries.iter().map(|q| &q.words).collect();
    let corpus = model.embed_videos(&videos)?;
    let q = model.embed_queries(&queries)?;
    Ok(similarity_matrices(&q, &corpus))
}

/// Scores every query against every video of `pack` with the fused
/// similarity and reports recalls.
pub fn evaluate<F: Scalar>(model: &PrvrModel<F>, pack: &FeaturePack, alpha: f64) -> Result<Evaluation> {
    check_alpha(alpha)?;
    let (s_v, s_m, _) = pack_similarities(model, pack)?;
    evaluate_scores(pack, &fuse_matrices(&s_m, &s_v, alpha)?)
}

/// Recalls and rankings for a precomputed `queries × videos` score matrix.
pub fn evaluate_scores(pack: &FeaturePack, scores: &Array2<f64>) -> Result<Evaluation> {
    let ids: Vec<String> = pack.videos.iter().map(|v| v.video_id.clone()).collect();
    let targets: Vec<usize> = pack.query_targets()?.into_iter().map(|(_, v)| v).collect();
    let ranks = target_ranks(scores, &ids, &targets)?;
    let results = pack
        .queries
        .iter()
        .zip(scores.rows())
        .zip(&ranks)
        .map(|((q, row), &rank)| RetrievalResult {
            query_id: q.query_id.clone(),
            ranking: rank_videos(row.as_slice().expect("standard layout"), &ids),
            rank_of_target: rank,
        })
        .collect();
    Ok(Evaluation {
        report: MetricReport::from_ranks(&ranks)?,
        results,
    })
}
