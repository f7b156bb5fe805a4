//! Text branch and the two video branches.
//!
//! * Text: FC projection of word features, positional embeddings, Transformer
//!   encoder, additive attention pooling into one sentence vector `q`.
//! * Video level: FC projection of frame features, positional embeddings,
//!   Transformer encoder giving `V_f`, attention pooling into `v`.
//! * Moment level: frames are mean-pooled into `T_m` consecutive segments,
//!   projected, position-embedded and encoded into `V_m`.
//!
//! The branches do not share weights.

use std::ops::Range;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::error::{Error, Result};
use crate::nn::{AttentionPool, Ctx, Init, Linear, ParamId, TransformerLayer};

/// Where the moment branch takes its positional signal from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentPositions {
    /// One embedding per condensed moment, added after projection.
    AfterCondense,
    /// Frame-position embeddings mean-pooled with the same segments as the
    /// frames, added after projection.
    FramePooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub moment_count: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub feature_dim_video: usize,
    pub feature_dim_text: usize,
    pub positional: bool,
    pub moment_positions: MomentPositions,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 384,
            moment_count: 32,
            num_layers: 1,
            num_heads: 4,
            ff_dim: 384,
            dropout: 0.2,
            max_positions: 512,
            feature_dim_video: 1024,
            feature_dim_text: 1024,
            positional: true,
            moment_positions: MomentPositions::AfterCondense,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of num_heads ({})",
                self.d_model, self.num_heads
            ));
        }
        if self.moment_count == 0 {
            return fail("moment_count must be at least 1".into());
        }
        if self.moment_count > self.max_positions {
            return fail("moment_count exceeds max_positions".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)".into());
        }
        if self.ff_dim == 0 || self.feature_dim_video == 0 || self.feature_dim_text == 0 {
            return fail("ff_dim and feature dimensions must be positive".into());
        }
        Ok(())
    }
}

/// Splits `len` positions into `parts` consecutive, near-equal segments,
/// larger segments first. When `len < parts` the trailing position is
/// repeated so every segment holds exactly one position.
pub fn partition(len: usize, parts: usize) -> Vec<Range<usize>> {
    assert!(len >= 1 && parts >= 1, "partition of empty range");
    if len < parts {
        return (0..parts)
            .map(|i| {
                let p = i.min(len - 1);
                p..p + 1
            })
            .collect();
    }
    let base = len / parts;
    let extra = len % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect()
}

/// Mean-pools consecutive rows of `frames` into `parts` rows.
pub fn condense<F: Scalar>(frames: &Array2<F>, parts: usize) -> Array2<F> {
    let segments = partition(frames.nrows(), parts);
    let mut out = Array2::zeros((parts, frames.ncols()));
    for (i, r) in segments.iter().enumerate() {
        let mean = frames
            .slice(s![r.clone(), ..])
            .mean_axis(Axis(0))
            .expect("non-empty segment");
        out.row_mut(i).assign(&mean);
    }
    out
}

/// Text encoder output for one sentence.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoding<'g, F: Scalar> {
    /// `Q`, `N × D`
    pub words: Var<'g, F>,
    /// `q`, `1 × D`
    pub sentence: Var<'g, F>,
}

/// Video encoder output for one video.
#[derive(Debug, Clone, Copy)]
pub struct VideoEncoding<'g, F: Scalar> {
    /// `V_f`, `T_f × D`
    pub frames: Var<'g, F>,
    /// `v`, `1 × D`
    pub video: Var<'g, F>,
    /// `V_m`, `T_m × D`
    pub moments: Var<'g, F>,
}

/// Shared body: projection → dropout → positions → Transformer layers.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub proj: Linear,
    pub positions: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl SequenceEncoder {
    fn new<F: Scalar>(init: &mut Init<'_, F>, name: &str, input_dim: usize, cfg: &EncoderConfig) -> Self {
        SequenceEncoder {
            proj: Linear::new(init, &format!("{name}.proj"), input_dim, cfg.d_model, true),
            positions: init.normal(&format!("{name}.positions"), cfg.max_positions, cfg.d_model, 0.02),
            layers: (0..cfg.num_layers)
                .map(|l| {
                    TransformerLayer::new(
                        init,
                        &format!("{name}.layer{l}"),
                        cfg.d_model,
                        cfg.num_heads,
                        cfg.ff_dim,
                    )
                })
                .collect(),
        }
    }

    fn project<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, input: &Array2<F>) -> Var<'g, F> {
        ctx.dropout(self.proj.forward(ctx, ctx.constant(input.clone())))
    }

    fn encode<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, F>,
        mut h: Var<'g, F>,
        positions: Option<Var<'g, F>>,
        mask: Option<&[bool]>,
    ) -> Var<'g, F> {
        if let Some(p) = positions {
            h = h + p;
        }
        for layer in &self.layers {
            h = layer.forward(ctx, h, mask);
        }
        h
    }

    fn positions<'g, F: Scalar>(&self, ctx: &Ctx<'g, F>, len: usize) -> Var<'g, F> {
        ctx.p(self.positions).slice_rows(0, len)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub body: SequenceEncoder,
    pub pool: AttentionPool,
}

impl TextEncoder {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, cfg: &EncoderConfig) -> Self {
        TextEncoder {
            body: SequenceEncoder::new(init, "text", cfg.feature_dim_text, cfg),
            pool: AttentionPool::new(init, "text.pool", cfg.d_model),
        }
    }

    pub fn encode<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, F>,
        cfg: &EncoderConfig,
        words: &Array2<F>,
    ) -> Result<TextEncoding<'g, F>> {
        self.encode_masked(ctx, cfg, words, None)
    }

    /// Encodes `words`, ignoring rows whose `mask` entry is `false` (padding).
    pub fn encode_masked<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, F>,
        cfg: &EncoderConfig,
        words: &Array2<F>,
        mask: Option<&[bool]>,
    ) -> Result<TextEncoding<'g, F>> {
        check_sequence("sentence", words, cfg.feature_dim_text, cfg.max_positions)?;
        if let Some(m) = mask {
            check_mask(m, words.nrows())?;
        }
        let h = self.body.project(ctx, words);
        let pos = cfg.positional.then(|| self.body.positions(ctx, words.nrows()));
        let encoded = self.body.encode(ctx, h, pos, mask);
        let sentence = self.pool.forward(ctx, encoded, mask);
        Ok(TextEncoding {
            words: encoded,
            sentence,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VideoEncoder {
    pub frame_body: SequenceEncoder,
    pub frame_pool: AttentionPool,
    pub moment_body: SequenceEncoder,
}

impl VideoEncoder {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, cfg: &EncoderConfig) -> Self {
        VideoEncoder {
            frame_body: SequenceEncoder::new(init, "video", cfg.feature_dim_video, cfg),
            frame_pool: AttentionPool::new(init, "video.pool", cfg.d_model),
            moment_body: SequenceEncoder::new(init, "moment", cfg.feature_dim_video, cfg),
        }
    }

    pub fn encode<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, F>,
        cfg: &EncoderConfig,
        frames: &Array2<F>,
    ) -> Result<VideoEncoding<'g, F>> {
        let (frame_feats, video) = self.encode_frames(ctx, cfg, frames)?;
        let moments = self.encode_moments(ctx, cfg, frames, None)?;
        Ok(VideoEncoding {
            frames: frame_feats,
            video,
            moments,
        })
    }

    /// Video-level branch: `(V_f, v)`.
    pub fn encode_frames<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, F>,
        cfg: &EncoderConfig,
        frames: &Array2<F>,
    ) -> Result<(Var<'g, F>, Var<'g, F>)> {
        check_sequence("video", frames, cfg.feature_dim_video, cfg.max_positions)?;
        let h = self.frame_body.project(ctx, frames);
        let pos = cfg.positional.then(|| self.frame_body.positions(ctx, frames.nrows()));
        let encoded = self.frame_body.encode(ctx, h, pos, None);
        let video = self.frame_pool.forward(ctx, encoded, None);
        Ok((encoded, video))
    }

    /// Moment-level branch. `order`, when given, permutes the condensed
    /// moments before projection (used by the temporal coherence task).
    pub fn encode_moments<'g, F: Scalar>(
        &self,
        ctx: &Ctx<'g, F>,
        cfg: &EncoderConfig,
        frames: &Array2<F>,
        order: Option<&[usize]>,
    ) -> Result<Var<'g, F>> {
        check_sequence("video", frames, cfg.feature_dim_video, usize::MAX)?;
        let mut condensed = condense(frames, cfg.moment_count);
        if let Some(order) = order {
            condensed = condensed.select(Axis(0), order);
        }
        let h = self.moment_body.project(ctx, &condensed);
        let pos = if !cfg.positional {
            None
        } else {
            Some(match cfg.moment_positions {
                MomentPositions::AfterCondense => self.moment_body.positions(ctx, cfg.moment_count),
                MomentPositions::FramePooled => {
                    let t = frames.nrows().min(cfg.max_positions);
                    let pool = pooling_matrix::<F>(t, cfg.moment_count);
                    ctx.constant(pool).matmul(self.moment_body.positions(ctx, t))
                }
            })
        };
        Ok(self.moment_body.encode(ctx, h, pos, None))
    }
}

/// `parts × len` matrix whose rows average the segments of [`partition`].
fn pooling_matrix<F: Scalar>(len: usize, parts: usize) -> Array2<F> {
    let mut m = Array2::zeros((parts, len));
    for (i, r) in partition(len, parts).into_iter().enumerate() {
        let w = F::one() / F::of(r.len() as f64);
        for j in r {
            m[[i, j]] = w;
        }
    }
    m
}

fn check_sequence<F: Scalar>(what: &str, x: &Array2<F>, dim: usize, max_len: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput(format!("empty {what} sequence")));
    }
    if x.ncols() != dim {
        return Err(Error::InvalidInput(format!(
            "{what} features have dimension {} but the encoder expects {dim}",
            x.ncols()
        )));
    }
    if x.nrows() > max_len {
        return Err(Error::InvalidInput(format!(
            "{what} sequence of length {} exceeds max_positions {max_len}",
            x.nrows()
        )));
    }
    Ok(())
}

fn check_mask(mask: &[bool], len: usize) -> Result<()> {
    if mask.len() != len {
        return Err(Error::InvalidInput(format!(
            "mask length {} != sequence length {len}",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidInput("every position is masked".into()));
    }
    Ok(())
}

/// Standalone additive attention pooling over the rows of `h`.
pub fn additive_attention_pool<'g, F: Scalar>(
    ctx: &Ctx<'g, F>,
    pool: &AttentionPool,
    h: Var<'g, F>,
    mask: Option<&[bool]>,
) -> Result<Var<'g, F>> {
    if let Some(m) = mask {
        check_mask(m, h.shape().0)?;
    }
    Ok(pool.forward(ctx, h, mask))
}

/// Encoder outputs for a mini-batch of `n` video–query pairs. Sequences are
/// encoded one by one, so no padding is involved.
pub struct EncodedBatch<'g, F: Scalar> {
    /// `Q` per query.
    pub words: Vec<Var<'g, F>>,
    /// `q` stacked, `n × D`.
    pub sentences: Var<'g, F>,
    /// `V_f` per video.
    pub frames: Vec<Var<'g, F>>,
    /// `v` stacked, `n × D`.
    pub videos: Var<'g, F>,
    /// `V_m` per video, each `T_m × D`.
    pub moments: Vec<Var<'g, F>>,
    /// All moments stacked, `(n · T_m) × D`; rows `i·T_m .. (i+1)·T_m`
    /// belong to video `i`.
    pub moments_flat: Var<'g, F>,
    pub moment_count: usize,
}

impl<'g, F: Scalar> EncodedBatch<'g, F> {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Batch index of the video owning each row of `moments_flat`.
    pub fn moment_owner(&self) -> Vec<usize> {
        (0..self.len() * self.moment_count)
            .map(|r| r / self.moment_count)
            .collect()
    }
}

/// Encodes `n` pairs: `videos[i]` is the video paired with `queries[i]`.
pub fn encode_batch<'g, F: Scalar>(
    ctx: &Ctx<'g, F>,
    cfg: &EncoderConfig,
    text: &TextEncoder,
    video: &VideoEncoder,
    videos: &[&Array2<F>],
    queries: &[&Array2<F>],
) -> Result<EncodedBatch<'g, F>> {
    if videos.len() != queries.len() || videos.is_empty() {
        return Err(Error::InvalidInput(format!(
            "batch needs matching non-empty video/query lists (got {} and {})",
            videos.len(),
            queries.len()
        )));
    }
    let g = ctx.graph();
    let texts = queries
        .iter()
        .map(|q| text.encode(ctx, cfg, q))
        .collect::<Result<Vec<_>>>()?;
    let vids = videos
        .iter()
        .map(|v| video.encode(ctx, cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let sentences: Vec<_> = texts.iter().map(|t| t.sentence).collect();
    let pooled: Vec<_> = vids.iter().map(|v| v.video).collect();
    let moments: Vec<_> = vids.iter().map(|v| v.moments).collect();
    Ok(EncodedBatch {
        words: texts.iter().map(|t| t.words).collect(),
        sentences: g.concat_rows(&sentences),
        frames: vids.iter().map(|v| v.frames).collect(),
        videos: g.concat_rows(&pooled),
        moments_flat: g.concat_rows(&moments),
        moments,
        moment_count: cfg.moment_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::ParamStore;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            moment_count: 4,
            num_layers: 1,
            num_heads: 2,
            ff_dim: 16,
            dropout: 0.0,
            max_positions: 64,
            feature_dim_video: 6,
            feature_dim_text: 5,
            positional: true,
            moment_positions: MomentPositions::AfterCondense,
        }
    }

    fn build(cfg: &EncoderConfig) -> (TextEncoder, VideoEncoder, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let t = TextEncoder::new(&mut init, cfg);
        let v = VideoEncoder::new(&mut init, cfg);
        (t, v, store)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Explicit enumeration of every composition of `len` into `parts`
    /// positive sizes; the partition rule must pick the lexicographically
    /// largest among the most balanced ones.
    fn balanced_partition_oracle(len: usize, parts: usize) -> Vec<usize> {
        fn rec(left: usize, parts: usize, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if parts == 0 {
                if left == 0 {
                    out.push(acc.clone());
                }
                return;
            }
            for size in 1..=left {
                acc.push(size);
                rec(left - size, parts - 1, acc, out);
                acc.pop();
            }
        }
        let mut all = Vec::new();
        rec(len, parts, &mut Vec::new(), &mut all);
        let spread = |c: &Vec<usize>| c.iter().max().unwrap() - c.iter().min().unwrap();
        let best = all.iter().map(spread).min().unwrap();
        all.into_iter().filter(|c| spread(c) == best).max().unwrap()
    }

    #[test]
    fn partition_matches_enumeration() {
        let sizes: Vec<usize> = partition(10, 4).iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        for len in 1..=12 {
            for parts in 1..=len {
                let sizes: Vec<usize> = partition(len, parts).iter().map(|r| r.len()).collect();
                assert_eq!(sizes, balanced_partition_oracle(len, parts), "len {len} parts {parts}");
            }
        }
        assert!(partition(64, 32).iter().all(|r| r.len() == 2));
    }

    #[test]
    fn short_videos_repeat_trailing_frames() {
        let p = partition(3, 5);
        assert_eq!(p, vec![0..1, 1..2, 2..3, 2..3, 2..3]);
        let frames = array![[1.0f64, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let c = condense(&frames, 5);
        assert_eq!(c.row(4), array![2.0, 2.0]);
    }

    proptest! {
        #[test]
        fn partition_covers_in_order(len in 1usize..200, parts in 1usize..40) {
            let p = partition(len, parts);
            prop_assert_eq!(p.len(), parts);
            if len >= parts {
                prop_assert_eq!(p[0].start, 0);
                prop_assert_eq!(p[parts - 1].end, len);
                for w in p.windows(2) {
                    prop_assert_eq!(w[0].end, w[1].start);
                }
                let sizes: Vec<usize> = p.iter().map(|r| r.len()).collect();
                prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            } else {
                prop_assert!(p.iter().all(|r| r.len() == 1));
            }
        }
    }

    #[test]
    fn single_word_sentence_is_the_word() {
        let cfg = small_cfg();
        let (text, _, store) = build(&cfg);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = text.encode(&ctx, &cfg, &random(&mut rng, 1, 5)).unwrap();
        assert_eq!(out.sentence.value(), out.words.value());
    }

    #[test]
    fn duplicated_words_encode_identically_without_positions() {
        let cfg = EncoderConfig {
            positional: false,
            ..small_cfg()
        };
        let (text, _, store) = build(&cfg);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut words = random(&mut rng, 4, 5);
        let first = words.row(0).to_owned();
        words.row_mut(2).assign(&first);
        let q = text.encode(&ctx, &cfg, &words).unwrap().words.value();
        for c in 0..8 {
            assert!((q[[0, c]] - q[[2, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_long_sentence_is_rejected() {
        let cfg = EncoderConfig {
            max_positions: 4,
            ..small_cfg()
        };
        let (text, video, store) = build(&cfg);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        assert!(text.encode(&ctx, &cfg, &Array2::zeros((5, 5))).is_err());
        assert!(video.encode(&ctx, &cfg, &Array2::zeros((0, 6))).is_err());
    }

    #[test]
    fn constant_frames_give_equal_moments_without_positions() {
        let cfg = EncoderConfig {
            positional: false,
            ..small_cfg()
        };
        let (_, video, store) = build(&cfg);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let row = array![0.3, -0.2, 0.9, 0.1, 0.0, -0.7];
        let frames = Array2::from_shape_fn((10, 6), |(_, c)| row[c]);
        let m = video.encode(&ctx, &cfg, &frames).unwrap().moments.value();
        for r in 1..4 {
            for c in 0..8 {
                assert!((m[[r, c]] - m[[0, c]]).abs() < 1e-12);
            }
        }
    }

    /// Straight-line re-implementation of projection + pre-norm Transformer +
    /// additive pooling for one head count, written against raw arrays.
    fn text_oracle(store: &ParamStore<f64>, words: &Array2<f64>, heads: usize) -> Array1<f64> {
        let p = |n: &str| store.get(store.id_of(n).unwrap()).clone();
        let linear = |x: &Array2<f64>, n: &str| x.dot(&p(&format!("{n}.weight"))) + &p(&format!("{n}.bias"));
        let layer_norm = |x: &Array2<f64>, n: &str| {
            let gain = p(&format!("{n}.gain"));
            let bias = p(&format!("{n}.bias"));
            let mut y = x.clone();
            for (r, mut row) in y.rows_mut().into_iter().enumerate() {
                let mean = x.row(r).mean().unwrap();
                let var = x.row(r).mapv(|v| (v - mean).powi(2)).mean().unwrap();
                for c in 0..row.len() {
                    row[c] = (x[[r, c]] - mean) / (var + 1e-5).sqrt() * gain[[0, c]] + bias[[0, c]];
                }
            }
            y
        };
        let softmax = |v: &[f64]| {
            let m = v.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let n = words.nrows();
        let pos = p("text.positions");
        let mut x = linear(words, "text.proj") + &pos.slice(s![0..n, ..]);
        let h = layer_norm(&x, "text.layer0.norm1");
        let q = linear(&h, "text.layer0.attention.query");
        let k = linear(&h, "text.layer0.attention.key");
        let v = linear(&h, "text.layer0.attention.value");
        let d = q.ncols();
        let hd = d / heads;
        let mut att = Array2::<f64>::zeros((n, d));
        for head in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..hd)
                            .map(|c| q[[i, head * hd + c]] * k[[j, head * hd + c]])
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let a = softmax(&scores);
                for c in 0..hd {
                    att[[i, head * hd + c]] = (0..n).map(|j| a[j] * v[[j, head * hd + c]]).sum();
                }
            }
        }
        x = x + linear(&att, "text.layer0.attention.out");
        let h = layer_norm(&x, "text.layer0.norm2");
        let hidden = linear(&h, "text.layer0.ff_in").mapv(|v| v.max(0.0));
        x = x + linear(&hidden, "text.layer0.ff_out");
        let w1 = p("text.pool.w1");
        let w2 = p("text.pool.w2");
        let scores: Vec<f64> = (0..n)
            .map(|i| x.row(i).dot(&w1).mapv(f64::tanh).dot(&w2.column(0)))
            .collect();
        let a = softmax(&scores);
        (0..n).fold(Array1::zeros(d), |acc, i| acc + &x.row(i).mapv(|v| v * a[i]))
    }

    #[test]
    fn text_encoder_matches_straightline_oracle() {
        let cfg = small_cfg();
        let (text, _, store) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 3, 7] {
            let words = random(&mut rng, n, 5);
            let g = Graph::new();
            let ctx = Ctx::eval(&g, &store);
            let got = text.encode(&ctx, &cfg, &words).unwrap().sentence.value();
            let want = text_oracle(&store, &words, cfg.num_heads);
            for c in 0..8 {
                assert!((got[[0, c]] - want[c]).abs() < 1e-10, "{} vs {}", got[[0, c]], want[c]);
            }
        }
    }

    #[test]
    fn masked_padding_changes_nothing() {
        let cfg = small_cfg();
        let (text, _, store) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let words = random(&mut rng, 4, 5);
        let padded = ndarray::concatenate(Axis(0), &[words.view(), random(&mut rng, 3, 5).view()]).unwrap();
        let mask = [true, true, true, true, false, false, false];
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let plain = text.encode(&ctx, &cfg, &words).unwrap();
        let masked = text.encode_masked(&ctx, &cfg, &padded, Some(&mask)).unwrap();
        let (a, b) = (plain.sentence.value(), masked.sentence.value());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-6));
        let (a, b) = (plain.words.value(), masked.words.value());
        for r in 0..4 {
            for c in 0..8 {
                assert!((a[[r, c]] - b[[r, c]]).abs() < 1e-6);
            }
        }
        assert!(text.encode_masked(&ctx, &cfg, &padded, Some(&[false; 7])).is_err());
    }

    #[test]
    fn attention_pool_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pool = AttentionPool::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "pool",
            4,
        );
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);

        let one = ctx.constant(array![[0.5, -1.0, 2.0, 0.25]]);
        assert_eq!(
            additive_attention_pool(&ctx, &pool, one, None).unwrap().value(),
            one.value()
        );

        let same = ctx.constant(Array2::from_shape_fn((5, 4), |(_, c)| c as f64 - 1.5));
        let out = additive_attention_pool(&ctx, &pool, same, None).unwrap().value();
        for c in 0..4 {
            assert!((out[[0, c]] - (c as f64 - 1.5)).abs() < 1e-12);
        }

        let h = random(&mut rng, 3, 4);
        let out = additive_attention_pool(&ctx, &pool, ctx.constant(h.clone()), None)
            .unwrap()
            .value();
        let w1 = store.get(pool.w1);
        let w2 = store.get(pool.w2);
        let s: Vec<f64> = (0..3)
            .map(|i| h.row(i).dot(w1).mapv(f64::tanh).dot(&w2.column(0)))
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for c in 0..4 {
            let want: f64 = (0..3).map(|i| s[i].exp() / z * h[[i, c]]).sum();
            assert!((out[[0, c]] - want).abs() < 1e-12);
        }

        let weights = pool
            .weights(&ctx, ctx.constant(h.clone()), Some(&[true, false, true]))
            .value();
        assert!((weights.sum() - 1.0).abs() < 1e-12);
        assert_eq!(weights[[0, 1]], 0.0);
        assert!(additive_attention_pool(&ctx, &pool, ctx.constant(h), Some(&[false, false, false])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pooled_vector_is_a_convex_combination(seed in 0u64..10_000, len in 1usize..8) {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = AttentionPool::new(&mut Init { store: &mut store, rng: &mut rng }, "pool", 4);
            let h = random(&mut rng, len, 4);
            let g = Graph::new();
            let ctx = Ctx::eval(&g, &store);
            let a = pool.weights(&ctx, ctx.constant(h.clone()), None).value();
            prop_assert!(a.iter().all(|&w| w >= 0.0));
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            let out = pool.forward(&ctx, ctx.constant(h.clone()), None).value();
            let recon = a.dot(&h);
            prop_assert!(out.iter().zip(recon.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn frame_pooled_positions_are_supported() {
        let cfg = EncoderConfig {
            moment_positions: MomentPositions::FramePooled,
            ..small_cfg()
        };
        let (_, video, store) = build(&cfg);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = video.encode(&ctx, &cfg, &random(&mut rng, 9, 6)).unwrap();
        assert_eq!(out.moments.shape(), (4, 8));
        assert_eq!(out.frames.shape(), (9, 8));
        assert_eq!(out.video.shape(), (1, 8));
    }

    #[test]
    fn encoding_is_deterministic_without_dropout() {
        let cfg = small_cfg();
        let (_, video, store) = build(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = random(&mut rng, 12, 6);
        let run = || {
            let g = Graph::new();
            let ctx = Ctx::eval(&g, &store);
            let e = video.encode(&ctx, &cfg, &frames).unwrap();
            (e.video.value(), e.moments.value())
        };
        assert_eq!(run(), run());
    }
}
