//! Intra-redundancy mining: redundant features obtained by latent
//! subtraction, used as hard negatives (`L_neg`) and aligned with each other
//! (`L_red`).

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::error::{Error, Result};
use crate::losses::{cosine_matrix, ContrastiveTerms, LossConfig, MomentSimilarity};
use crate::nn::{Ctx, Init, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrmConfig {
    pub use_neg: bool,
    pub use_red: bool,
    /// One FC head for both subtractions; `false` gives each view its own.
    pub shared_head: bool,
    /// Detach `v`, `m_k` and `q` before the subtraction.
    pub stop_gradient: bool,
}

impl Default for IrmConfig {
    fn default() -> Self {
        IrmConfig {
            use_neg: true,
            use_red: true,
            shared_head: true,
            stop_gradient: false,
        }
    }
}

/// FC layer(s) applied to the feature differences.
#[derive(Debug, Clone)]
pub struct RedundancyHead {
    pub video_view: Linear,
    /// `None` when the head is shared.
    pub query_view: Option<Linear>,
}

impl RedundancyHead {
    pub fn new<F: Scalar>(init: &mut Init<'_, F>, dim: usize, shared: bool) -> Self {
        let video_view = Linear::new(init, "redundancy.fc", dim, dim, true);
        let query_view = (!shared).then(|| Linear::new(init, "redundancy.fc_query", dim, dim, true));
        RedundancyHead { video_view, query_view }
    }

    fn query_head(&self) -> &Linear {
        self.query_view.as_ref().unwrap_or(&self.video_view)
    }
}

/// Rows of `r_v` and `r_q`, one per (video, paired query).
#[derive(Debug, Clone, Copy)]
pub struct RedundantPair<'g, F: Scalar> {
    pub r_v: Var<'g, F>,
    pub r_q: Var<'g, F>,
}

/// `r_v = FC(v − m_k)`, `r_q = FC(v − q)`, row-wise over `n × D` inputs.
pub fn redundant_features<'g, F: Scalar>(
    ctx: &Ctx<'g, F>,
    head: &RedundancyHead,
    v: Var<'g, F>,
    m_k: Var<'g, F>,
    q: Var<'g, F>,
    stop_gradient: bool,
) -> RedundantPair<'g, F> {
    let (v, m_k, q) = if stop_gradient {
        (v.detach(), m_k.detach(), q.detach())
    } else {
        (v, m_k, q)
    };
    RedundantPair {
        r_v: head.video_view.forward(ctx, v - m_k),
        r_q: head.query_head().forward(ctx, v - q),
    }
}

/// Key moment of each video for its own query, stacked `n × D`.
pub fn own_key_moments<'g, F: Scalar>(
    moments_flat: Var<'g, F>,
    sims: &MomentSimilarity<'g, F>,
    moment_count: usize,
) -> Var<'g, F> {
    let rows: Vec<usize> = (0..sims.keys.nrows())
        .map(|i| i * moment_count + sims.keys[[i, i]])
        .collect();
    moments_flat.select_rows(&rows)
}

/// Moment-level triplet + λ2·InfoNCE with `cos(r_v,q)` and `cos(r_q,q)`
/// appended to every text anchor's negatives.
pub fn neg_loss<'g, F: Scalar>(
    moment_sims: Var<'g, F>,
    queries: Var<'g, F>,
    redundant: &RedundantPair<'g, F>,
    cfg: &LossConfig,
) -> Result<Var<'g, F>> {
    let n = moment_sims.shape().0;
    if n < 2 {
        return Err(Error::InvalidInput("L_neg needs a batch of at least 2".into()));
    }
    let q = queries.l2_normalize_rows();
    let col = |r: Var<'g, F>| (q * r.l2_normalize_rows()).sum_rows();
    let extra = queries.graph().concat_cols(&[col(redundant.r_v), col(redundant.r_q)]);
    Ok(ContrastiveTerms::new(moment_sims, Some(extra), cfg).weighted(cfg.lambda2))
}

/// Triplet + λ2·InfoNCE aligning `r_q[i]` with `r_v[i]`; zero below two
/// pairs.
pub fn red_loss<'g, F: Scalar>(redundant: &RedundantPair<'g, F>, cfg: &LossConfig) -> Var<'g, F> {
    let g = redundant.r_v.graph();
    if redundant.r_v.shape().0 < 2 {
        return g.scalar(F::zero());
    }
    let sims = cosine_matrix(redundant.r_q, redundant.r_v);
    ContrastiveTerms::new(sims, None, cfg).weighted(cfg.lambda2)
}

pub struct IrmLoss<'g, F: Scalar> {
    pub total: Var<'g, F>,
    pub neg: Option<Var<'g, F>>,
    pub red: Option<Var<'g, F>>,
    pub redundant: RedundantPair<'g, F>,
}

/// `L_irm = L_neg + L_red`, either term switchable.
#[allow(clippy::too_many_arguments)]
pub fn irm_loss<'g, F: Scalar>(
    ctx: &Ctx<'g, F>,
    head: &RedundancyHead,
    cfg: &IrmConfig,
    loss_cfg: &LossConfig,
    videos: Var<'g, F>,
    queries: Var<'g, F>,
    moments_flat: Var<'g, F>,
    moment_sims: &MomentSimilarity<'g, F>,
    moment_count: usize,
) -> Result<IrmLoss<'g, F>> {
    let m_k = own_key_moments(moments_flat, moment_sims, moment_count);
    let redundant = redundant_features(ctx, head, videos, m_k, queries, cfg.stop_gradient);
    let neg = if cfg.use_neg {
        Some(neg_loss(moment_sims.sims, queries, &redundant, loss_cfg)?)
    } else {
        None
    };
    let red = cfg.use_red.then(|| red_loss(&redundant, loss_cfg));
    let mut total = ctx.graph().scalar(F::zero());
    for part in [neg, red].into_iter().flatten() {
        total = total + part;
    }
    Ok(IrmLoss {
        total,
        neg,
        red,
        redundant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::losses::{infonce_batch, moment_similarity, triplet_batch, NegativePolicy};
    use crate::nn::ParamStore;
    use ndarray::{s, Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn head(store: &mut ParamStore<f64>, seed: u64, dim: usize, shared: bool) -> RedundancyHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = RedundancyHead::new(
            &mut Init {
                store: &mut *store,
                rng: &mut rng,
            },
            dim,
            shared,
        );
        let b = store.id_of("redundancy.fc.bias").unwrap();
        *store.get_mut(b) = random(&mut rng, 1, dim);
        h
    }

    #[test]
    fn zero_difference_gives_bias() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 1, 4, true);
        let bias = store.get(store.id_of("redundancy.fc.bias").unwrap()).clone();
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let x = g.constant(Array2::from_shape_vec((1, 4), vec![0.3, -1.0, 2.0, 0.1]).unwrap());
        let y = g.constant(Array2::from_shape_vec((1, 4), vec![1.0, 1.0, 0.0, 0.5]).unwrap());
        let r = redundant_features(&ctx, &h, x, x, y, false);
        assert_eq!(r.r_v.value(), bias);
        let r = redundant_features(&ctx, &h, x, y, x, false);
        assert_eq!(r.r_q.value(), bias);
    }

    #[test]
    fn affine_map_of_differences() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 2, 4, true);
        let w = store.get(store.id_of("redundancy.fc.weight").unwrap()).clone();
        let b = store.get(store.id_of("redundancy.fc.bias").unwrap()).row(0).to_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (v, m, q) = (random(&mut rng, 1, 4), random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let r = redundant_features(
            &ctx,
            &h,
            g.constant(v.clone()),
            g.constant(m.clone()),
            g.constant(q.clone()),
            false,
        );
        let affine = |d: Array1<f64>| -> Array1<f64> {
            Array1::from_shape_fn(4, |j| b[j] + (0..4).map(|i| d[i] * w[[i, j]]).sum::<f64>())
        };
        let ev = affine(&v.row(0) - &m.row(0));
        let eq = affine(&v.row(0) - &q.row(0));
        for j in 0..4 {
            assert!((r.r_v.value()[[0, j]] - ev[j]).abs() < 1e-12);
            assert!((r.r_q.value()[[0, j]] - eq[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn views_depend_only_on_their_inputs() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 4, 8, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (v, m, q) = (random(&mut rng, 3, 8), random(&mut rng, 3, 8), random(&mut rng, 3, 8));
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &store);
        let base = redundant_features(
            &ctx,
            &h,
            g.constant(v.clone()),
            g.constant(m.clone()),
            g.constant(q.clone()),
            false,
        );
        let q2 = random(&mut rng, 3, 8);
        let m2 = random(&mut rng, 3, 8);
        let pq = redundant_features(
            &ctx,
            &h,
            g.constant(v.clone()),
            g.constant(m.clone()),
            g.constant(q2),
            false,
        );
        let pm = redundant_features(
            &ctx,
            &h,
            g.constant(v.clone()),
            g.constant(m2),
            g.constant(q.clone()),
            false,
        );
        assert_eq!(base.r_v.value(), pq.r_v.value());
        assert_eq!(base.r_q.value(), pm.r_q.value());
    }

    #[test]
    fn separate_heads_differ() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 6, 4, false);
        assert!(h.query_view.is_some());
        assert_eq!(store.len(), 4);
    }

    /// Hardest-negative triplet + InfoNCE with the augmented negative sets
    /// written out one anchor at a time.
    fn neg_oracle(sm: &Array2<f64>, extra: &Array2<f64>, cfg: &LossConfig) -> f64 {
        let n = sm.nrows();
        let tau = cfg.temperature;
        let (mut trip, mut t2v, mut v2t) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let mut text_negs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sm[[i, j]]).collect();
            text_negs.extend(extra.row(i).iter());
            let video_negs: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sm[[j, i]]).collect();
            let hard = |v: &[f64]| v.iter().copied().fold(f64::MIN, f64::max);
            trip += (cfg.margin + hard(&text_negs) - sm[[i, i]]).max(0.0);
            trip += (cfg.margin + hard(&video_negs) - sm[[i, i]]).max(0.0);
            let pos = (sm[[i, i]] / tau).exp();
            let row: f64 = pos + text_negs.iter().map(|s| (s / tau).exp()).sum::<f64>();
            let col: f64 = pos + video_negs.iter().map(|s| (s / tau).exp()).sum::<f64>();
            t2v -= (pos / row).ln();
            v2t -= (pos / col).ln();
        }
        let n = n as f64;
        trip / n + cfg.lambda2 * (t2v / n + v2t / n) / 2.0
    }

    #[test]
    fn neg_loss_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LossConfig::default();
        for _ in 0..10 {
            let (q, r_v, r_q) = (random(&mut rng, 3, 8), random(&mut rng, 3, 8), random(&mut rng, 3, 8));
            let m = random(&mut rng, 12, 8);
            let g = Graph::new();
            let qv = g.constant(q.clone());
            let sims = moment_similarity(qv, g.constant(m), 4);
            let red = RedundantPair {
                r_v: g.constant(r_v.clone()),
                r_q: g.constant(r_q.clone()),
            };
            let got = neg_loss(sims.sims, qv, &red, &cfg).unwrap().item();
            let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
                a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
            };
            let extra = Array2::from_shape_fn((3, 2), |(i, k)| {
                cos(q.row(i), if k == 0 { r_v.row(i) } else { r_q.row(i) })
            });
            assert!((got - neg_oracle(&sims.sims.value(), &extra, &cfg)).abs() < 1e-10);
        }
    }

    #[test]
    fn dominated_redundants_leave_triplet_unchanged() {
        // Every in-batch negative sits at similarity ≥ 0; redundants are
        // orthogonal to the query.
        let cfg = LossConfig::default();
        let g: Graph<f64> = Graph::new();
        let sm = g.constant(ndarray::array![[0.9, 0.3, 0.1], [0.2, 0.8, 0.4], [0.5, 0.0, 0.7]]);
        let q = g.constant(ndarray::array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]);
        let r = g.constant(ndarray::array![[0.0, 1.0], [0.0, 2.0], [0.0, -1.0]]);
        let red = RedundantPair { r_v: r, r_q: r };
        let with = triplet_batch(
            sm,
            Some(g.concat_cols(&[(q * r).sum_rows(), (q * r).sum_rows()])),
            cfg.margin,
            NegativePolicy::Hardest,
        );
        let without = triplet_batch(sm, None, cfg.margin, NegativePolicy::Hardest);
        assert_eq!(with.item(), without.item());
        let total = neg_loss(sm, q, &red, &cfg).unwrap().item();
        assert!(total >= without.item());
    }

    #[test]
    fn dominant_redundant_drives_the_hinge() {
        let cfg = LossConfig::default();
        let g: Graph<f64> = Graph::new();
        let sm = g.constant(ndarray::array![[0.5, -0.5], [-0.5, 0.5]]);
        let q = g.constant(ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
        let r = g.constant(ndarray::array![[1.0, 0.0], [0.0, -1.0]]);
        let extra = g.concat_cols(&[(q * r).sum_rows(), (q * r).sum_rows()]);
        let got = triplet_batch(sm, Some(extra), cfg.margin, NegativePolicy::Hardest).item();
        // anchor 0: hardest is cos(r,q)=1 → 0.2+1−0.5; anchor 1: −0.5 vs −1 →
        // 0.2−0.5−0.5 < 0; video anchors: 0.2−0.5−0.5 < 0.
        assert!((got - (0.7 / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn red_loss_cases() {
        let cfg = LossConfig::default();
        let g: Graph<f64> = Graph::new();
        let one = RedundantPair {
            r_v: g.constant(Array2::ones((1, 4))),
            r_q: g.constant(Array2::ones((1, 4))),
        };
        assert_eq!(red_loss(&one, &cfg).item(), 0.0);

        let same = RedundantPair {
            r_v: g.constant(Array2::ones((4, 3))),
            r_q: g.constant(Array2::from_elem((4, 3), -2.0)),
        };
        let nce = infonce_batch(cosine_matrix(same.r_q, same.r_v), None, cfg.temperature).item();
        assert!((nce - 4f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (random(&mut rng, 3, 8), random(&mut rng, 3, 8));
        let red = RedundantPair {
            r_v: g.constant(a.clone()),
            r_q: g.constant(b.clone()),
        };
        let s = cosine_matrix(g.constant(b), g.constant(a));
        let expected = triplet_batch(s, None, cfg.margin, cfg.negatives).item()
            + cfg.lambda2 * infonce_batch(s, None, cfg.temperature).item();
        assert!((red_loss(&red, &cfg).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn switches_select_components() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 10, 8, true);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (v, q, m) = (random(&mut rng, 3, 8), random(&mut rng, 3, 8), random(&mut rng, 12, 8));
        let run = |irm: IrmConfig| {
            let g = Graph::new();
            let ctx = Ctx::eval(&g, &store);
            let qv = g.constant(q.clone());
            let mv = g.constant(m.clone());
            let sims = moment_similarity(qv, mv, 4);
            let l = irm_loss(
                &ctx,
                &h,
                &irm,
                &LossConfig::default(),
                g.constant(v.clone()),
                qv,
                mv,
                &sims,
                4,
            )
            .unwrap();
            (l.total.item(), l.neg.map(|x| x.item()), l.red.map(|x| x.item()))
        };
        let (both, neg, red) = run(IrmConfig::default());
        assert!((both - (neg.unwrap() + red.unwrap())).abs() < 1e-12);
        let (only_neg, _, none) = run(IrmConfig {
            use_red: false,
            ..IrmConfig::default()
        });
        assert_eq!((only_neg, none), (neg.unwrap(), None));
        let (only_red, none, _) = run(IrmConfig {
            use_neg: false,
            ..IrmConfig::default()
        });
        assert_eq!((only_red, none), (red.unwrap(), None));
    }

    #[test]
    fn key_moments_follow_the_diagonal() {
        let g: Graph<f64> = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (q, m) = (random(&mut rng, 3, 4), random(&mut rng, 9, 4));
        let sims = moment_similarity(g.constant(q.clone()), g.constant(m.clone()), 3);
        let mk = own_key_moments(g.constant(m.clone()), &sims, 3).value();
        for i in 0..3 {
            let (k, _) = crate::losses::key_moment(m.slice(s![i * 3..i * 3 + 3, ..]), q.row(i)).unwrap();
            assert_eq!(mk.row(i), m.row(i * 3 + k));
        }
    }
}
