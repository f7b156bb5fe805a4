//! Post-training probes on a held-out pack: temporal-order accuracy, the
//! redundant-versus-key-moment similarity gap, per-moment similarity curves
//! and pseudo-pair dumps.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Scalar};
use crate::error::{Error, Result};
use crate::featurepack::FeaturePack;
use crate::ice::{mask_paired, mine_pseudo_pairs, MiningInput};
use crate::losses::argmax_first;
use crate::model::{normalize_rows, to_scalar, PrvrModel};
use crate::nn::Ctx;
use crate::tcp::{group_accuracy, group_labels};
use crate::trainer::make_batches;

/// Group-label accuracy on unshuffled sequences, pooled over positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderAccuracy {
    /// Frame-level branch.
    pub video: f64,
    /// Moment-level branch; `None` when the model has fewer moments than
    /// groups.
    pub moment: Option<f64>,
    pub videos: usize,
    pub groups: usize,
}

pub fn order_accuracy<F: Scalar>(model: &PrvrModel<F>, pack: &FeaturePack) -> Result<OrderAccuracy> {
    let groups = model.config.tcp_groups;
    let enc = &model.config.encoder;
    if pack.videos.is_empty() {
        return Err(Error::InvalidInput("order accuracy needs at least one video".into()));
    }
    let moment_labels = (groups <= enc.moment_count)
        .then(|| group_labels(enc.moment_count, groups))
        .transpose()?;
    let (mut frame_hits, mut frame_total) = (0.0, 0usize);
    let mut moment_hits = 0.0;
    for video in &pack.videos {
        let labels = group_labels(video.frames.nrows(), groups)?;
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &model.params);
        let encoded = model.video.encode(&ctx, enc, &to_scalar(&video.frames))?;
        let logits = model.tcp.video.forward(&ctx, encoded.frames).value();
        frame_hits += group_accuracy(&logits, &labels) * labels.len() as f64;
        frame_total += labels.len();
        if let Some(labels) = &moment_labels {
            let logits = model.tcp.moment.forward(&ctx, encoded.moments).value();
            moment_hits += group_accuracy(&logits, labels);
        }
    }
    let n = pack.videos.len();
    Ok(OrderAccuracy {
        video: frame_hits / frame_total as f64,
        moment: moment_labels.map(|_| moment_hits / n as f64),
        videos: n,
        groups,
    })
}

/// Mean cosine to the query of the key moment and of the video-view
/// redundant feature `r_v = FC(v − m_k)`, over every (query, paired video).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RedundancyGap {
    pub key_moment: f64,
    pub redundant: f64,
    pub pairs: usize,
}

impl RedundancyGap {
    pub fn gap(&self) -> f64 {
        self.key_moment - self.redundant
    }
}

fn cos(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let d = (a.dot(&a) * b.dot(&b)).sqrt();
    if d > 0.0 {
        a.dot(&b) / d
    } else {
        0.0
    }
}

pub fn redundancy_gap<F: Scalar>(model: &PrvrModel<F>, pack: &FeaturePack) -> Result<RedundancyGap> {
    let targets = pack.query_targets()?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("redundancy gap needs at least one query".into()));
    }
    let enc = &model.config.encoder;
    let (mut key_sum, mut red_sum) = (0.0, 0.0);
    for &(qi, vi) in &targets {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &model.params);
        let q = model
            .text
            .encode(&ctx, enc, &to_scalar(&pack.queries[qi].words))?
            .sentence;
        let video = model.video.encode(&ctx, enc, &to_scalar(&pack.videos[vi].frames))?;
        let qv = q.value().mapv(|x| x.to_f64());
        let moments = video.moments.value().mapv(|x| x.to_f64());
        let sims: Vec<f64> = moments.rows().into_iter().map(|m| cos(qv.row(0), m)).collect();
        let (k, key) = argmax_first(sims.iter().copied()).expect("at least one moment");
        let r_v = model
            .redundancy
            .video_view
            .forward(&ctx, video.video - video.moments.select_rows(&[k]))
            .value()
            .mapv(|x| x.to_f64());
        key_sum += key;
        red_sum += cos(qv.row(0), r_v.row(0));
    }
    let n = targets.len() as f64;
    Ok(RedundancyGap {
        key_moment: key_sum / n,
        redundant: red_sum / n,
        pairs: targets.len(),
    })
}

/// Cosine between one query and every moment of one video.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityCurve {
    pub query_id: String,
    pub video_id: String,
    pub moments: Vec<f64>,
    pub key: usize,
    /// Cosine to the pooled video vector.
    pub video: f64,
    /// Cosine to `r_v` built from the key moment.
    pub redundant: f64,
}

/// Curve of `query_id` against `video_id`, or against its paired video when
/// `video_id` is `None`.
pub fn similarity_curve<F: Scalar>(
    model: &PrvrModel<F>,
    pack: &FeaturePack,
    query_id: &str,
    video_id: Option<&str>,
) -> Result<SimilarityCurve> {
    let query = pack
        .queries
        .iter()
        .find(|q| q.query_id == query_id)
        .ok_or_else(|| Error::InvalidInput(format!("no query `{query_id}` in the pack")))?;
    let video_id = match video_id {
        Some(v) => v.to_string(),
        None => pack.pairing[query_id].video_id.clone(),
    };
    let video = pack
        .videos
        .iter()
        .find(|v| v.video_id == video_id)
        .ok_or_else(|| Error::InvalidInput(format!("no video `{video_id}` in the pack")))?;

    let enc = &model.config.encoder;
    let g = Graph::new();
    let ctx = Ctx::eval(&g, &model.params);
    let q = model
        .text
        .encode(&ctx, enc, &to_scalar(&query.words))?
        .sentence
        .value()
        .mapv(|x| x.to_f64());
    let encoded = model.video.encode(&ctx, enc, &to_scalar(&video.frames))?;
    let moments = encoded.moments.value().mapv(|x| x.to_f64());
    let sims: Vec<f64> = moments.rows().into_iter().map(|m| cos(q.row(0), m)).collect();
    let (key, _) = argmax_first(sims.iter().copied()).expect("at least one moment");
    let pooled = encoded.video.value().mapv(|x| x.to_f64());
    let r_v = model
        .redundancy
        .video_view
        .forward(&ctx, encoded.video - encoded.moments.select_rows(&[key]))
        .value()
        .mapv(|x| x.to_f64());
    Ok(SimilarityCurve {
        query_id: query_id.to_string(),
        video_id,
        key,
        video: cos(q.row(0), pooled.row(0)),
        redundant: cos(q.row(0), r_v.row(0)),
        moments: sims,
    })
}

/// A pseudo-pair mined over a pack, with its batch-local indices and the
/// pack ids behind them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinedPair {
    pub batch: usize,
    pub moment_row: usize,
    pub text_col: usize,
    pub similarity: f64,
    pub video_id: String,
    pub moment: usize,
    pub query_id: String,
}

/// Replays the trainer's batching of `pack` (first epoch, stream 1 of
/// `seed`) and mines every batch with a frozen model.
pub fn mine_pack_pairs<F: Scalar>(
    model: &PrvrModel<F>,
    pack: &FeaturePack,
    batch_size: usize,
    seed: u64,
    threshold: f64,
) -> Result<Vec<MinedPair>> {
    let targets = pack.query_targets()?;
    let t_m = model.config.encoder.moment_count;
    let queries = normalize_rows(&model.embed_queries(&pack.queries.iter().map(|q| &q.words).collect::<Vec<_>>())?);
    let corpus = model.embed_videos(&pack.videos.iter().map(|v| &v.frames).collect::<Vec<_>>())?;
    let moments: Vec<Array2<f64>> = corpus.moments.iter().map(normalize_rows).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut out = Vec::new();
    for (b, batch) in make_batches(&targets, batch_size, &mut rng).iter().enumerate() {
        let n = batch.len();
        let mut sims = Array2::zeros((n * t_m, n));
        for (i, &bi) in batch.iter().enumerate() {
            let m = &moments[targets[bi].1];
            for (j, &bj) in batch.iter().enumerate() {
                let col = m.dot(&queries.row(targets[bj].0));
                sims.slice_mut(s![i * t_m..(i + 1) * t_m, j]).assign(&col);
            }
        }
        let owner: Vec<usize> = (0..n * t_m).map(|r| r / t_m).collect();
        let input = MiningInput::new(mask_paired(&sims, &owner), owner)?.with_threshold(threshold);
        for p in mine_pseudo_pairs(&input) {
            let (_, vi) = targets[batch[p.moment_row / t_m]];
            let (qi, _) = targets[batch[p.text_col]];
            out.push(MinedPair {
                batch: b,
                moment_row: p.moment_row,
                text_col: p.text_col,
                similarity: p.similarity,
                video_id: pack.videos[vi].video_id.clone(),
                moment: p.moment_row % t_m,
                query_id: pack.queries[qi].query_id.clone(),
            });
        }
    }
    Ok(out)
}
