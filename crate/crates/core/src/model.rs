//! The full retrieval model: text and video encoders plus the heads used
//! only during training (redundancy FC and the two group classifiers).

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Scalar};
use crate::encoders::{encode_batch, EncodedBatch, EncoderConfig, TextEncoder, VideoEncoder};
use crate::error::{Error, Result};
use crate::irm::RedundancyHead;
use crate::nn::{Ctx, Init, ParamStore};
use crate::tcp::TcpHeads;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub shared_redundancy_head: bool,
    pub tcp_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            shared_redundancy_head: true,
            tcp_groups: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrvrModel<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub text: TextEncoder,
    pub video: VideoEncoder,
    pub redundancy: RedundancyHead,
    pub tcp: TcpHeads,
}

/// Inference-time embeddings of a video corpus.
#[derive(Debug, Clone)]
pub struct VideoEmbeddings {
    /// `v` per video, `n × D`.
    pub videos: Array2<f64>,
    /// `V_m` per video, each `T_m × D`.
    pub moments: Vec<Array2<f64>>,
}

pub(crate) fn to_scalar<F: Scalar>(a: &Array2<f32>) -> Array2<F> {
    a.mapv(|v| F::of(v as f64))
}

impl<F: Scalar> PrvrModel<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        if config.tcp_groups == 0 {
            return Err(Error::Config("tcp_groups must be at least 1".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let d = config.encoder.d_model;
        let text = TextEncoder::new(&mut init, &config.encoder);
        let video = VideoEncoder::new(&mut init, &config.encoder);
        let redundancy = RedundancyHead::new(&mut init, d, config.shared_redundancy_head);
        let tcp = TcpHeads::new(&mut init, d, config.tcp_groups);
        Ok(PrvrModel {
            config,
            params,
            text,
            video,
            redundancy,
            tcp,
        })
    }

    /// Rebuilds the layer layout for `config` around existing parameters.
    pub fn with_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((name, fresh), (other, value)) in model.params.iter().zip(params.iter()) {
            if name != other || fresh.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{other}` {:?} does not match `{name}` {:?}",
                    value.dim(),
                    fresh.dim()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<G: Scalar>(&self) -> PrvrModel<G> {
        PrvrModel {
            config: self.config.clone(),
            params: self.params.cast(),
            text: self.text.clone(),
            video: self.video.clone(),
            redundancy: self.redundancy.clone(),
            tcp: self.tcp.clone(),
        }
    }

    pub fn encode_batch<'g>(
        &self,
        ctx: &Ctx<'g, F>,
        videos: &[&Array2<F>],
        queries: &[&Array2<F>],
    ) -> Result<EncodedBatch<'g, F>> {
        encode_batch(ctx, &self.config.encoder, &self.text, &self.video, videos, queries)
    }

    /// Sentence embeddings `q`, `n × D`, without dropout.
    pub fn embed_queries(&self, queries: &[&Array2<f32>]) -> Result<Array2<f64>> {
        let d = self.config.encoder.d_model;
        let mut out = Array2::zeros((queries.len(), d));
        for (i, q) in queries.iter().enumerate() {
            let g = Graph::new();
            let ctx = Ctx::eval(&g, &self.params);
            let enc = self.text.encode(&ctx, &self.config.encoder, &to_scalar(q))?;
            out.row_mut(i).assign(&enc.sentence.value().row(0).mapv(|v| v.to_f64()));
        }
        Ok(out)
    }

    /// Video and moment embeddings, without dropout.
    pub fn embed_videos(&self, videos: &[&Array2<f32>]) -> Result<VideoEmbeddings> {
        let d = self.config.encoder.d_model;
        let mut pooled = Array2::zeros((videos.len(), d));
        let mut moments = Vec::with_capacity(videos.len());
        for (i, v) in videos.iter().enumerate() {
            let g = Graph::new();
            let ctx = Ctx::eval(&g, &self.params);
            let enc = self.video.encode(&ctx, &self.config.encoder, &to_scalar(v))?;
            pooled.row_mut(i).assign(&enc.video.value().row(0).mapv(|x| x.to_f64()));
            moments.push(enc.moments.value().mapv(|x| x.to_f64()));
        }
        Ok(VideoEmbeddings {
            videos: pooled,
            moments,
        })
    }

    /// Frame-level features `V_f` of one video, without dropout.
    pub fn frame_features(&self, frames: &Array2<f32>) -> Result<Array2<f64>> {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.params);
        let (v_f, _) = self
            .video
            .encode_frames(&ctx, &self.config.encoder, &to_scalar(frames))?;
        Ok(v_f.value().mapv(|x| x.to_f64()))
    }
}

/// Rows of `a` scaled to unit length (zero rows stay zero).
pub fn normalize_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// `(S_v, S_m)` for every query × video, plus the key moment behind each
/// `S_m` entry.
pub fn similarity_matrices(
    queries: &Array2<f64>,
    corpus: &VideoEmbeddings,
) -> (Array2<f64>, Array2<f64>, Array2<usize>) {
    let q = normalize_rows(queries);
    let s_v = q.dot(&normalize_rows(&corpus.videos).t());
    let (nq, nv) = (q.nrows(), corpus.moments.len());
    let mut s_m = Array2::zeros((nq, nv));
    let mut keys = Array2::zeros((nq, nv));
    for (j, m) in corpus.moments.iter().enumerate() {
        let sims = q.dot(&normalize_rows(m).t());
        for (i, row) in sims.axis_iter(Axis(0)).enumerate() {
            let (k, s) = crate::losses::argmax_first(row.iter().copied()).expect("at least one moment");
            s_m[[i, j]] = s;
            keys[[i, j]] = k;
        }
    }
    (s_v, s_m, keys)
}
