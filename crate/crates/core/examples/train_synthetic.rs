//! Generates the default synthetic corpus, trains the full model with the
//! desk-scale preset and reports held-out recalls.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [epochs] [modules] [key=value ...]
//! ```
//! `modules` is a `+`-joined subset of `ice`, `irm`, `tcp`, or `base`.
//! Trailing `key=value` pairs override flat config keys such as
//! `train.seed=2` or `weights.tcp=0.5`.

use std::time::Instant;

use prvr::eval::evaluate;
use prvr::featurepack::{generate_synthetic, SyntheticSpec};
use prvr::trainer::{train, ModuleSwitches, TrainConfig};

fn main() -> prvr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(60);
    let modules = args.next().unwrap_or_else(|| "ice+irm+tcp".into());

    let spec = SyntheticSpec::default();
    let packs = generate_synthetic(&spec)?;
    let mut cfg = TrainConfig::desk(spec.feature_dim);
    cfg.train.max_epochs = epochs;
    cfg.train.early_stop_patience = cfg.train.early_stop_patience.min(epochs.max(1));
    cfg.modules = ModuleSwitches {
        ice: modules.contains("ice"),
        irm: modules.contains("irm"),
        tcp: modules.contains("tcp"),
    };
    for kv in args {
        cfg.apply_override(&kv)?;
    }

    let start = Instant::now();
    let outcome = train(&packs.train, &packs.val, &cfg)?;
    let model = outcome.best.model()?;
    let test = evaluate(&model, &packs.test, cfg.eval.alpha)?;
    println!(
        "{} | {} epochs (best {}) in {:.1}s | ice pairs {} (violations {})",
        cfg.modules.label(),
        outcome.history.len(),
        outcome.best.epoch,
        start.elapsed().as_secs_f64(),
        outcome.ice_pairs(),
        outcome.ice_violations()
    );
    print!("{}", test.report.table());
    Ok(())
}
