//! Cosine similarity, key-moment selection, triplet ranking and InfoNCE
//! losses, and the base objective
//! `L_base = L_trip_v + L_trip_m + λ1·L_nce_v + λ2·L_nce_m`.
//!
//! Similarity matrices are laid out text × video: `S[i][j]` compares query
//! `i` with video `j`, and the diagonal holds the positive pairs.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::encoders::EncodedBatch;
use crate::error::{Error, Result};

/// Which in-batch negatives the triplet term looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Only the most similar negative per anchor.
    Hardest,
    /// Hinge summed over every negative.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub temperature: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub negatives: NegativePolicy,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            temperature: 1.0 / 30.0,
            lambda1: 0.02,
            lambda2: 0.04,
            negatives: NegativePolicy::Hardest,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("loss: margin and temperature must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss: lambda weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Video-level and moment-level similarity of one video–query pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityOutcome<F> {
    pub video: F,
    pub moment: F,
    /// Zero-based index of the key moment.
    pub key: usize,
}

/// `aᵀb / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine<F: Scalar>(a: ArrayView1<F>, b: ArrayView1<F>) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "cosine of vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == F::zero() || nb == F::zero() {
        return Err(Error::InvalidInput("cosine of a zero-norm vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).max(-F::one()).min(F::one()))
}

/// Index of the first maximum (ties go to the smallest index).
pub fn argmax_first<F: PartialOrd + Copy>(values: impl IntoIterator<Item = F>) -> Option<(usize, F)> {
    let mut best: Option<(usize, F)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

/// Key moment of `moments` (rows) for query `q`: `(k, cos(m_k, q))`.
pub fn key_moment<F: Scalar>(moments: ArrayView2<F>, q: ArrayView1<F>) -> Result<(usize, F)> {
    let sims = moments
        .rows()
        .into_iter()
        .map(|m| cosine(m, q))
        .collect::<Result<Vec<_>>>()?;
    argmax_first(sims).ok_or_else(|| Error::InvalidInput("key moment of an empty moment set".into()))
}

pub fn similarity_outcome<F: Scalar>(
    video: ArrayView1<F>,
    moments: ArrayView2<F>,
    q: ArrayView1<F>,
) -> Result<SimilarityOutcome<F>> {
    let (key, moment) = key_moment(moments, q)?;
    Ok(SimilarityOutcome {
        video: cosine(video, q)?,
        moment,
        key,
    })
}

/// `max(0, margin + s_neg − s_pos)`
pub fn triplet_loss<F: Scalar>(s_pos: F, s_neg: F, margin: F) -> F {
    (margin + s_neg - s_pos).max(F::zero())
}

/// Pairwise cosine similarities of the rows of `a` and `b`.
pub fn cosine_matrix<'g, F: Scalar>(a: Var<'g, F>, b: Var<'g, F>) -> Var<'g, F> {
    a.l2_normalize_rows().matmul_t(b.l2_normalize_rows())
}

/// Moment-level similarity for every (query, video) pair of a batch.
pub struct MomentSimilarity<'g, F: Scalar> {
    /// `S_m`, `n × n`.
    pub sims: Var<'g, F>,
    /// `keys[[i, j]]`: key moment of video `j` for query `i`.
    pub keys: Array2<usize>,
}

/// `S_m[i][j] = max_k cos(m_{j,k}, q_i)`. The argmax is taken on values;
/// the gradient flows through the selected cosine.
pub fn moment_similarity<'g, F: Scalar>(
    queries: Var<'g, F>,
    moments_flat: Var<'g, F>,
    moment_count: usize,
) -> MomentSimilarity<'g, F> {
    let n = queries.shape().0;
    let all = cosine_matrix(queries, moments_flat);
    let videos = moments_flat.shape().0 / moment_count;
    let keys = all.with_value(|c| {
        Array2::from_shape_fn((n, videos), |(i, j)| {
            let row = c.row(i);
            let seg = (0..moment_count).map(|k| row[j * moment_count + k]);
            argmax_first(seg).expect("moment_count > 0").0
        })
    });
    let idx: Vec<(usize, usize)> = keys
        .indexed_iter()
        .map(|((i, j), &k)| (i, j * moment_count + k))
        .collect();
    MomentSimilarity {
        sims: all.gather(&idx).reshape(n, videos),
        keys,
    }
}

/// Symmetric triplet ranking loss over a square similarity matrix, averaged
/// over anchors and summed over the text→video and video→text directions.
/// `extra` (`n × k`) adds negatives to the text-anchor direction only.
pub fn triplet_batch<'g, F: Scalar>(
    sims: Var<'g, F>,
    extra: Option<Var<'g, F>>,
    margin: f64,
    policy: NegativePolicy,
) -> Var<'g, F> {
    let g = sims.graph();
    let (n, m) = sims.shape();
    assert_eq!(n, m, "triplet_batch expects a square similarity matrix");
    let k = extra.map_or(0, |e| e.shape().1);
    if n < 2 && k == 0 {
        return g.scalar(F::zero());
    }
    let text_side = match extra {
        Some(e) => g.concat_cols(&[sims, e]),
        None => sims,
    };
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let pos = sims.gather(&diag);
    let margin = F::of(margin);

    let text_negs: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| (0..n + k).filter(|&j| j != i).map(|j| (i, j)).collect())
        .collect();
    let video_negs: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| (j, i)).collect())
        .collect();

    let hinge = |source: Var<'g, F>, negs: &[Vec<(usize, usize)>]| -> Option<Var<'g, F>> {
        let (pos_idx, neg_idx): (Vec<usize>, Vec<(usize, usize)>) = match policy {
            NegativePolicy::Hardest => source.with_value(|v| {
                negs.iter()
                    .enumerate()
                    .filter(|(_, cands)| !cands.is_empty())
                    .map(|(i, cands)| {
                        let (best, _) = argmax_first(cands.iter().map(|&c| v[c])).unwrap();
                        (i, cands[best])
                    })
                    .unzip()
            }),
            NegativePolicy::All => negs
                .iter()
                .enumerate()
                .flat_map(|(i, cands)| cands.iter().map(move |&c| (i, c)))
                .unzip(),
        };
        if neg_idx.is_empty() {
            return None;
        }
        let neg = source.gather(&neg_idx);
        let p = pos.select_rows(&pos_idx);
        Some((neg - p).add_scalar(margin).relu().sum())
    };

    let mut total = g.scalar(F::zero());
    for part in [hinge(text_side, &text_negs), hinge(sims, &video_negs)]
        .into_iter()
        .flatten()
    {
        total = total + part;
    }
    total.scale(F::one() / F::of(n as f64))
}

/// Symmetric InfoNCE: mean of the text→video and video→text directions of
/// `−log softmax(S/τ)` on the diagonal. `extra` (`n × k`) joins the
/// denominator of the text→video direction only.
pub fn infonce_batch<'g, F: Scalar>(sims: Var<'g, F>, extra: Option<Var<'g, F>>, temperature: f64) -> Var<'g, F> {
    let g = sims.graph();
    let (n, m) = sims.shape();
    assert_eq!(n, m, "infonce_batch expects a square similarity matrix");
    let inv_t = F::of(1.0 / temperature);
    let text_side = match extra {
        Some(e) => g.concat_cols(&[sims, e]),
        None => sims,
    };
    let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let t2v = text_side.scale(inv_t).log_softmax_rows().gather(&diag).sum();
    let v2t = sims.t().scale(inv_t).log_softmax_rows().gather(&diag).sum();
    (t2v + v2t).scale(F::of(-0.5 / n as f64))
}

/// Triplet and InfoNCE terms computed on the same similarity matrix.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveTerms<'g, F: Scalar> {
    pub triplet: Var<'g, F>,
    pub nce: Var<'g, F>,
}

impl<'g, F: Scalar> ContrastiveTerms<'g, F> {
    pub fn new(sims: Var<'g, F>, extra: Option<Var<'g, F>>, cfg: &LossConfig) -> Self {
        ContrastiveTerms {
            triplet: triplet_batch(sims, extra, cfg.margin, cfg.negatives),
            nce: infonce_batch(sims, extra, cfg.temperature),
        }
    }

    /// `triplet + λ·nce`
    pub fn weighted(&self, lambda: f64) -> Var<'g, F> {
        self.triplet + self.nce.scale(F::of(lambda))
    }
}

/// The four components of the base objective and their weighted sum.
pub struct BaseLoss<'g, F: Scalar> {
    pub total: Var<'g, F>,
    pub video: ContrastiveTerms<'g, F>,
    pub moment: ContrastiveTerms<'g, F>,
    /// `S_v`, `n × n`.
    pub video_sims: Var<'g, F>,
    /// `S_m`, `n × n`, with the key-moment indices behind it.
    pub moment_sims: MomentSimilarity<'g, F>,
}

pub fn base_loss<'g, F: Scalar>(batch: &EncodedBatch<'g, F>, cfg: &LossConfig) -> Result<BaseLoss<'g, F>> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "the base objective needs at least 2 pairs for in-batch negatives, got {}",
            batch.len()
        )));
    }
    let video_sims = cosine_matrix(batch.sentences, batch.videos);
    let moment_sims = moment_similarity(batch.sentences, batch.moments_flat, batch.moment_count);
    let video = ContrastiveTerms::new(video_sims, None, cfg);
    let moment = ContrastiveTerms::new(moment_sims.sims, None, cfg);
    let total =
        video.triplet + moment.triplet + video.nce.scale(F::of(cfg.lambda1)) + moment.nce.scale(F::of(cfg.lambda2));
    Ok(BaseLoss {
        total,
        video,
        moment,
        video_sims,
        moment_sims,
    })
}
