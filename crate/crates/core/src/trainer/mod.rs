//! Optimisation loop: Adam on the composed objective, per-epoch validation
//! SumR, early stopping, metrics log and checkpoints.

mod ablation;
mod checkpoint;
mod config;
mod objective;

use std::collections::BTreeSet;
use std::path::Path;

use log::{debug, info};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{ablation_table, run_ablation, AblationRow, ABLATION_ROWS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use config::{EvalConfig, IceConfig, ModuleSwitches, ModuleWeights, OptimConfig, Precision, TrainConfig};
pub use objective::{tcp_objective, total_loss, LossBreakdown, Objective};

use crate::autograd::{Graph, Scalar};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::featurepack::FeaturePack;
use crate::ice::PseudoPair;
use crate::model::{to_scalar, PrvrModel};
use crate::nn::{Ctx, ParamStore};

/// Adam with the usual moment coefficients.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamStore<F>, learning_rate: f64) -> Self {
        let zeros: Vec<Array2<F>> = params.iter().map(|(_, p)| Array2::zeros(p.raw_dim())).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` is aligned with the store's parameter order.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Array2<F>]) {
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.step));
        let c2 = F::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (F::of(self.learning_rate), F::of(self.eps));
        for ((id, g), (m, v)) in params.ids().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (F::one() - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (F::one() - b2) * g * g);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p = *p - lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Splits `(query, video)` pairs into shuffled mini-batches in which every
/// video appears at most once. Batches smaller than 2 are dropped.
pub fn make_batches(targets: &[(usize, usize)], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut pending: Vec<usize> = (0..targets.len()).collect();
    pending.shuffle(rng);
    let mut batches = Vec::new();
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut seen = BTreeSet::new();
        let mut rest = Vec::new();
        for i in pending {
            if batch.len() < batch_size && seen.insert(targets[i].1) {
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        batches.push(batch);
        pending = rest;
    }
    batches.retain(|b| b.len() >= 2);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means.
    pub loss: LossBreakdown,
    pub ice_pairs: usize,
    pub ice_violations: usize,
    pub val: MetricReport,
}

/// Hooks for watching a run.
pub trait TrainObserver {
    /// `members[i]` is the `(query, video)` index pair in the training pack
    /// behind row `i` of the batch; pseudo-pair text columns index it
    /// directly and moment rows via `row / moment_count`.
    fn on_batch(&mut self, _epoch: usize, _batch: usize, _members: &[(usize, usize)], _pairs: &[PseudoPair]) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation SumR (initialisation if no epoch
    /// ran).
    pub best: Checkpoint,
    /// Parameters after the last epoch run.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn ice_violations(&self) -> usize {
        self.history.iter().map(|r| r.ice_violations).sum()
    }

    pub fn ice_pairs(&self) -> usize {
        self.history.iter().map(|r| r.ice_pairs).sum()
    }
}

pub fn train(train_pack: &FeaturePack, val_pack: &FeaturePack, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(train_pack, val_pack, cfg, &mut ())
}

pub fn train_observed(
    train_pack: &FeaturePack,
    val_pack: &FeaturePack,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    match cfg.train.precision {
        Precision::Train32 => run::<f32>(train_pack, val_pack, cfg, observer),
        Precision::Check64 => run::<f64>(train_pack, val_pack, cfg, observer),
    }
}

fn check_inputs(pack: &FeaturePack, cfg: &TrainConfig) -> Result<()> {
    let enc = &cfg.encoder;
    if pack.meta.feature_dim_video != enc.feature_dim_video || pack.meta.feature_dim_text != enc.feature_dim_text {
        return Err(Error::Config(format!(
            "pack `{}` has feature dims video {} / text {} but the encoder expects {} / {}",
            pack.meta.split,
            pack.meta.feature_dim_video,
            pack.meta.feature_dim_text,
            enc.feature_dim_video,
            enc.feature_dim_text
        )));
    }
    if cfg.modules.tcp && cfg.tcp.video_branch {
        if let Some(v) = pack.videos.iter().find(|v| v.frames.nrows() < cfg.tcp.groups) {
            return Err(Error::Config(format!(
                "video `{}` has {} frames, fewer than tcp.groups = {}",
                v.video_id,
                v.frames.nrows(),
                cfg.tcp.groups
            )));
        }
    }
    Ok(())
}

fn snapshot<F: Scalar>(
    model: &PrvrModel<F>,
    cfg: &TrainConfig,
    epoch: usize,
    best_sum_r: Option<f64>,
    rngs: [&ChaCha8Rng; 2],
) -> Checkpoint {
    Checkpoint {
        model_config: model.config.clone(),
        train_config: cfg.clone(),
        epoch,
        best_sum_r,
        rng: rngs.iter().map(|r| RngState::capture(r)).collect(),
        params: model.params.cast(),
    }
}

fn run<F: Scalar>(
    train_pack: &FeaturePack,
    val_pack: &FeaturePack,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_pack.validate()?;
    val_pack.validate()?;
    check_inputs(train_pack, cfg)?;
    check_inputs(val_pack, cfg)?;

    let seed = cfg.train.seed;
    let mut model = PrvrModel::<F>::new(cfg.model_config(), seed)?;
    let mut adam = Adam::new(&model.params, cfg.train.learning_rate);
    let videos: Vec<Array2<F>> = train_pack.videos.iter().map(|v| to_scalar(&v.frames)).collect();
    let queries: Vec<Array2<F>> = train_pack.queries.iter().map(|q| to_scalar(&q.words)).collect();
    let targets = train_pack.query_targets()?;
    info!(
        "training {} on {} pairs, {} parameters",
        cfg.modules.label(),
        targets.len(),
        model.num_parameters()
    );

    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);

    let mut best = snapshot(&model, cfg, 0, None, [&data_rng, &dropout_rng]);
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.train.max_epochs {
        let batches = make_batches(&targets, cfg.train.batch_size, &mut data_rng);
        if batches.is_empty() {
            return Err(Error::InvalidInput(
                "training pack yields no batch with 2 distinct videos".into(),
            ));
        }
        let ice_active = epoch > cfg.ice.warmup_epochs;
        let mut mean = LossBreakdown::default();
        let (mut ice_pairs, mut ice_violations) = (0, 0);

        for (b, batch) in batches.iter().enumerate() {
            let vids: Vec<&Array2<F>> = batch.iter().map(|&i| &videos[targets[i].1]).collect();
            let qs: Vec<&Array2<F>> = batch.iter().map(|&i| &queries[targets[i].0]).collect();
            let (grads, log, pairs, violations, rng) = {
                let g = Graph::new();
                let ctx = Ctx::new(&g, &model.params, true, cfg.encoder.dropout, dropout_rng.clone());
                let obj = total_loss(&model, &ctx, cfg, &vids, &qs, ice_active, &mut data_rng)?;
                if let Some(component) = obj.log.non_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        component: component.to_string(),
                    });
                }
                let grads = ctx.params.gradients(&g.backward(obj.total));
                (grads, obj.log, obj.pairs, obj.ice_violations, ctx.into_rng())
            };
            dropout_rng = rng;
            adam.step(&mut model.params, &grads);
            let members: Vec<(usize, usize)> = batch.iter().map(|&i| targets[i]).collect();
            observer.on_batch(epoch, b, &members, &pairs);
            mean.accumulate(&log, 1.0 / batches.len() as f64);
            ice_pairs += pairs.len();
            ice_violations += violations;
            debug!("epoch {epoch} batch {b}: loss {:.4}", log.total);
        }

        let val = evaluate(&model, val_pack, cfg.eval.alpha)?.report;
        let record = EpochRecord {
            epoch,
            loss: mean,
            ice_pairs,
            ice_violations,
            val,
        };
        info!(
            "epoch {epoch}: loss {:.4}, val R@1 {:.1} SumR {:.1}, ice pairs {ice_pairs}",
            record.loss.total, record.val.r1, record.val.sum_r
        );
        observer.on_epoch(&record);
        let sum_r = record.val.sum_r;
        history.push(record);

        if best.best_sum_r.is_none_or(|b| sum_r > b) {
            best = snapshot(&model, cfg, epoch, Some(sum_r), [&data_rng, &dropout_rng]);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.train.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let epochs_run = history.len();
    Ok(TrainOutcome {
        last: snapshot(&model, cfg, epochs_run, best.best_sum_r, [&data_rng, &dropout_rng]),
        best,
        history,
        stopped_early,
    })
}

pub const METRICS_HEADER: [&str; 20] = [
    "epoch",
    "total",
    "base",
    "trip_v",
    "trip_m",
    "nce_v",
    "nce_m",
    "ice",
    "neg",
    "red",
    "irm",
    "tcp",
    "tcp_video",
    "tcp_moment",
    "ice_pairs",
    "ice_violations",
    "R@1",
    "R@5",
    "R@10",
    "R@100",
];

/// Writes one row per epoch: every loss component, ICE counts, validation
/// recalls and SumR.
pub fn write_metrics_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = METRICS_HEADER.to_vec();
    header.push("SumR");
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in history {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.loss.named().iter().map(|(_, v)| v.to_string()));
        row.push(r.ice_pairs.to_string());
        row.push(r.ice_violations.to_string());
        row.extend(r.val.recalls().iter().map(f64::to_string));
        row.push(r.val.sum_r.to_string());
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}
