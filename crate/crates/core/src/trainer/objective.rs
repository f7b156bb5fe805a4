//! The training objective
//! `L = L_base + [ice]·w_ice·L_ice + [irm]·w_irm·L_irm + [tcp]·w_tcp·L_tcp`.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::encoders::EncodedBatch;
use crate::error::Result;
use crate::ice::{ice_step, PseudoPair};
use crate::irm::irm_loss;
use crate::losses::base_loss;
use crate::model::PrvrModel;
use crate::nn::Ctx;
use crate::tcp::{apply_shuffle, group_labels, shuffle_subset, tcp_loss};

use super::config::TrainConfig;

/// Scalar value of every loss component. Disabled modules report 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub base: f64,
    pub trip_v: f64,
    pub trip_m: f64,
    pub nce_v: f64,
    pub nce_m: f64,
    pub ice: f64,
    pub neg: f64,
    pub red: f64,
    pub irm: f64,
    pub tcp: f64,
    pub tcp_video: f64,
    pub tcp_moment: f64,
}

impl LossBreakdown {
    pub(crate) fn named(&self) -> [(&'static str, f64); 13] {
        [
            ("total", self.total),
            ("base", self.base),
            ("trip_v", self.trip_v),
            ("trip_m", self.trip_m),
            ("nce_v", self.nce_v),
            ("nce_m", self.nce_m),
            ("ice", self.ice),
            ("neg", self.neg),
            ("red", self.red),
            ("irm", self.irm),
            ("tcp", self.tcp),
            ("tcp_video", self.tcp_video),
            ("tcp_moment", self.tcp_moment),
        ]
    }

    /// First component that is not finite, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        let named = self.named();
        named[1..]
            .iter()
            .chain(&named[..1])
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }

    /// `base + w·module` terms re-added from the parts.
    pub fn resum(&self, cfg: &TrainConfig) -> f64 {
        let s = &cfg.modules;
        let w = &cfg.weights;
        self.base
            + if s.ice { w.ice * self.ice } else { 0.0 }
            + if s.irm { w.irm * self.irm } else { 0.0 }
            + if s.tcp { w.tcp * self.tcp } else { 0.0 }
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        let fields = [
            (&mut self.total, other.total),
            (&mut self.base, other.base),
            (&mut self.trip_v, other.trip_v),
            (&mut self.trip_m, other.trip_m),
            (&mut self.nce_v, other.nce_v),
            (&mut self.nce_m, other.nce_m),
            (&mut self.ice, other.ice),
            (&mut self.neg, other.neg),
            (&mut self.red, other.red),
            (&mut self.irm, other.irm),
            (&mut self.tcp, other.tcp),
            (&mut self.tcp_video, other.tcp_video),
            (&mut self.tcp_moment, other.tcp_moment),
        ];
        for (dst, src) in fields {
            *dst += scale * src;
        }
    }
}

pub struct Objective<'g, F: Scalar> {
    pub total: Var<'g, F>,
    pub log: LossBreakdown,
    pub pairs: Vec<PseudoPair>,
    pub ice_violations: usize,
    pub batch: EncodedBatch<'g, F>,
}

/// Sum of the branch TCP losses, each averaged over the batch's videos.
/// `rng` draws the shuffles.
pub fn tcp_objective<'g, F: Scalar>(
    model: &PrvrModel<F>,
    ctx: &Ctx<'g, F>,
    cfg: &TrainConfig,
    batch: &EncodedBatch<'g, F>,
    videos: &[&Array2<F>],
    rng: &mut ChaCha8Rng,
) -> Result<(Var<'g, F>, Var<'g, F>)> {
    let g = ctx.graph();
    let enc = &model.config.encoder;
    let groups = cfg.tcp.groups;
    let inv_n = F::of(1.0 / videos.len() as f64);
    let mut video_loss = g.scalar(F::zero());
    let mut moment_loss = g.scalar(F::zero());
    for (i, frames) in videos.iter().enumerate() {
        if cfg.tcp.video_branch {
            let labels = group_labels(frames.nrows(), groups)?;
            let s = shuffle_subset(&labels, cfg.tcp.shuffle_fraction, rng);
            let (shuffled, _) = model.video.encode_frames(ctx, enc, &apply_shuffle(frames, &s))?;
            video_loss = video_loss + tcp_loss(ctx, &model.tcp.video, batch.frames[i], shuffled, &labels, &s.labels);
        }
        if cfg.tcp.moment_branch {
            let labels = group_labels(enc.moment_count, groups)?;
            let s = shuffle_subset(&labels, cfg.tcp.shuffle_fraction, rng);
            let shuffled = model.video.encode_moments(ctx, enc, frames, Some(&s.order))?;
            moment_loss =
                moment_loss + tcp_loss(ctx, &model.tcp.moment, batch.moments[i], shuffled, &labels, &s.labels);
        }
    }
    Ok((video_loss.scale(inv_n), moment_loss.scale(inv_n)))
}

/// Encodes the batch and builds the full objective. `videos[i]` is paired
/// with `queries[i]`; videos should be distinct within a batch.
pub fn total_loss<'g, F: Scalar>(
    model: &PrvrModel<F>,
    ctx: &Ctx<'g, F>,
    cfg: &TrainConfig,
    videos: &[&Array2<F>],
    queries: &[&Array2<F>],
    ice_active: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Objective<'g, F>> {
    let batch = model.encode_batch(ctx, videos, queries)?;
    let base = base_loss(&batch, &cfg.loss)?;
    let w = &cfg.weights;
    let mut total = base.total;
    let mut log = LossBreakdown {
        base: base.total.item().to_f64(),
        trip_v: base.video.triplet.item().to_f64(),
        trip_m: base.moment.triplet.item().to_f64(),
        nce_v: base.video.nce.item().to_f64(),
        nce_m: base.moment.nce.item().to_f64(),
        ..LossBreakdown::default()
    };

    let mut pairs = Vec::new();
    let mut ice_violations = 0;
    if cfg.modules.ice && ice_active {
        let ice = ice_step(&batch, cfg.ice.threshold, &cfg.loss)?;
        log.ice = ice.loss.item().to_f64();
        total = total + ice.loss.scale(F::of(w.ice));
        pairs = ice.pairs;
        ice_violations = ice.violations;
    }

    if cfg.modules.irm {
        let irm = irm_loss(
            ctx,
            &model.redundancy,
            &cfg.irm,
            &cfg.loss,
            batch.videos,
            batch.sentences,
            batch.moments_flat,
            &base.moment_sims,
            batch.moment_count,
        )?;
        log.neg = irm.neg.map_or(0.0, |v| v.item().to_f64());
        log.red = irm.red.map_or(0.0, |v| v.item().to_f64());
        log.irm = irm.total.item().to_f64();
        total = total + irm.total.scale(F::of(w.irm));
    }

    if cfg.modules.tcp {
        let (tv, tm) = tcp_objective(model, ctx, cfg, &batch, videos, rng)?;
        let tcp = tv + tm;
        log.tcp_video = tv.item().to_f64();
        log.tcp_moment = tm.item().to_f64();
        log.tcp = tcp.item().to_f64();
        total = total + tcp.scale(F::of(w.tcp));
    }

    log.total = total.item().to_f64();
    Ok(Objective {
        total,
        log,
        pairs,
        ice_violations,
        batch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::encoders::EncoderConfig;
    use crate::nn::ParamStore;
    use crate::trainer::config::ModuleSwitches;
    use rand::{Rng, SeedableRng};

    fn cfg(switches: ModuleSwitches) -> TrainConfig {
        let mut c = TrainConfig::desk(6);
        c.encoder = EncoderConfig {
            d_model: 8,
            moment_count: 4,
            num_heads: 2,
            ff_dim: 8,
            dropout: 0.0,
            max_positions: 32,
            feature_dim_video: 6,
            feature_dim_text: 5,
            ..EncoderConfig::default()
        };
        c.tcp.groups = 4;
        c.modules = switches;
        // Low threshold so ICE actually fires on random features.
        c.ice.threshold = -1.0;
        c
    }

    fn data(seed: u64) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..3)
            .map(|i| Array2::from_shape_fn((8 + i, 6), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let q = (0..3)
            .map(|i| Array2::from_shape_fn((3 + i, 5), |_| rng.random_range(-1.0..1.0)))
            .collect();
        (v, q)
    }

    fn run(model: &PrvrModel<f64>, c: &TrainConfig, params: &ParamStore<f64>, seed: u64) -> (f64, LossBreakdown) {
        let (v, q) = data(seed);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, params);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let o = total_loss(
            model,
            &ctx,
            c,
            &v.iter().collect::<Vec<_>>(),
            &q.iter().collect::<Vec<_>>(),
            true,
            &mut rng,
        )
        .unwrap();
        (o.total.item(), o.log)
    }

    #[test]
    fn components_resum_to_total() {
        for switches in [ModuleSwitches::none(), ModuleSwitches::all()] {
            let mut c = cfg(switches);
            c.weights.irm = 0.5;
            let m = PrvrModel::<f64>::new(c.model_config(), 1).unwrap();
            let (total, log) = run(&m, &c, &m.params, 0);
            assert!((log.resum(&c) - total).abs() < 1e-6);
            assert!((log.total - total).abs() < 1e-12);
            assert!((log.irm - (log.neg + log.red)).abs() < 1e-12);
            assert!((log.tcp - (log.tcp_video + log.tcp_moment)).abs() < 1e-12);
            if switches == ModuleSwitches::none() {
                assert_eq!(total, log.base);
                assert_eq!((log.ice, log.irm, log.tcp), (0.0, 0.0, 0.0));
            } else {
                assert!(log.irm > 0.0 && log.tcp > 0.0);
            }
        }
    }

    #[test]
    fn disabled_modules_get_zero_gradient() {
        let c = cfg(ModuleSwitches::none());
        let m = PrvrModel::<f64>::new(c.model_config(), 2).unwrap();
        let (v, q) = data(1);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let o = total_loss(
            &m,
            &ctx,
            &c,
            &v.iter().collect::<Vec<_>>(),
            &q.iter().collect::<Vec<_>>(),
            true,
            &mut rng,
        )
        .unwrap();
        let grads = ctx.params.gradients(&g.backward(o.total));
        for (id, grad) in m.params.ids().zip(&grads) {
            let name = m.params.name(id);
            if name.starts_with("redundancy.") || name.starts_with("tcp.") {
                assert!(grad.iter().all(|&x| x == 0.0), "{name}");
            }
        }
        assert!(grads.iter().any(|gr| gr.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let c = cfg(ModuleSwitches::all());
        let m = PrvrModel::<f64>::new(c.model_config(), 3).unwrap();
        let (v, q) = data(2);
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &m.params);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let o = total_loss(
            &m,
            &ctx,
            &c,
            &v.iter().collect::<Vec<_>>(),
            &q.iter().collect::<Vec<_>>(),
            true,
            &mut rng,
        )
        .unwrap();
        let grads = ctx.params.gradients(&g.backward(o.total));
        let h = 1e-6;
        let mut checked = 0;
        for (id, grad) in m.params.ids().zip(&grads) {
            // A few entries of every parameter array.
            for flat in [0, grad.len() / 2, grad.len() - 1] {
                let (r, col) = (flat / grad.ncols(), flat % grad.ncols());
                let mut plus = m.params.clone();
                plus.get_mut(id)[[r, col]] += h;
                let mut minus = m.params.clone();
                minus.get_mut(id)[[r, col]] -= h;
                let fd = (run(&m, &c, &plus, 2).0 - run(&m, &c, &minus, 2).0) / (2.0 * h);
                let an = grad[[r, col]];
                assert!(
                    (an - fd).abs() <= 1e-6_f64.max(1e-3 * fd.abs().max(an.abs())),
                    "{}[{r},{col}]: analytic {an} vs fd {fd}",
                    m.params.name(id)
                );
                checked += 1;
            }
        }
        assert!(checked > 30);
    }
}
