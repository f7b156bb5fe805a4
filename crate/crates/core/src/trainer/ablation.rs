//! The eight-row module ablation: every on/off combination of ICE, IRM and
//! TCP, trained over several seeds and scored on a held-out pack.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{ModuleSwitches, TrainConfig};
use super::train;
use crate::error::Result;
use crate::eval::{evaluate, MetricReport};
use crate::featurepack::FeaturePack;

const fn row(ice: bool, irm: bool, tcp: bool) -> ModuleSwitches {
    ModuleSwitches { ice, irm, tcp }
}

/// Base, the three single modules, the three pairs, then everything.
pub const ABLATION_ROWS: [ModuleSwitches; 8] = [
    row(false, false, false),
    row(true, false, false),
    row(false, true, false),
    row(false, false, true),
    row(false, true, true),
    row(true, false, true),
    row(true, true, false),
    row(true, true, true),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// 1-based position in [`ABLATION_ROWS`].
    pub row: usize,
    pub switches: ModuleSwitches,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricReport>,
}

impl AblationRow {
    /// Seed-averaged recalls and SumR.
    pub fn mean(&self) -> [f64; 5] {
        let n = self.per_seed.len().max(1) as f64;
        let mut out = [0.0; 5];
        for r in &self.per_seed {
            for (o, v) in out.iter_mut().zip(r.recalls().into_iter().chain([r.sum_r])) {
                *o += v / n;
            }
        }
        out
    }

    pub fn mean_sum_r(&self) -> f64 {
        self.mean()[4]
    }
}

/// Trains `rows` (1-based indices into [`ABLATION_ROWS`]) once per seed
/// with `base` otherwise unchanged, and evaluates the best checkpoint of
/// each run on `test`.
pub fn run_ablation(
    train_pack: &FeaturePack,
    val_pack: &FeaturePack,
    test_pack: &FeaturePack,
    base: &TrainConfig,
    rows: &[usize],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::with_capacity(rows.len());
    for &r in rows {
        let switches = *ABLATION_ROWS
            .get(r.wrapping_sub(1))
            .ok_or_else(|| crate::error::Error::InvalidInput(format!("ablation row {r} outside 1..=8")))?;
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.modules = switches;
            cfg.train.seed = seed;
            let outcome = train(train_pack, val_pack, &cfg)?;
            let report = evaluate(&outcome.best.model()?, test_pack, cfg.eval.alpha)?.report;
            info!("row {r} ({}) seed {seed}: SumR {:.1}", switches.label(), report.sum_r);
            per_seed.push(report);
        }
        out.push(AblationRow {
            row: r,
            switches,
            seeds: seeds.to_vec(),
            per_seed,
        });
    }
    Ok(out)
}

/// Comparison table, one line per row, recalls rounded to one decimal.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "x" } else { "-" };
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>3}  {:>3} {:>3} {:>3}  {:>6} {:>6} {:>6} {:>6} {:>7}",
        "row", "ice", "irm", "tcp", "R@1", "R@5", "R@10", "R@100", "SumR"
    );
    for r in rows {
        let [r1, r5, r10, r100, sum] = r.mean();
        let sw = r.switches;
        let _ = writeln!(
            s,
            "{:>3}  {:>3} {:>3} {:>3}  {r1:>6.1} {r5:>6.1} {r10:>6.1} {r100:>6.1} {sum:>7.1}",
            r.row,
            mark(sw.ice),
            mark(sw.irm),
            mark(sw.tcp)
        );
    }
    s
}
