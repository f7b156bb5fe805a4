//! Trains the full model on a synthetic corpus and runs the post-training
//! probes: temporal-order accuracy, the redundant-feature similarity gap,
//! one per-moment similarity curve and a pseudo-pair count.
//!
//! ```text
//! cargo run --release --example diagnostics -- [noise_scale] [epochs]
//! ```

use prvr::diagnostics::{mine_pack_pairs, order_accuracy, redundancy_gap, similarity_curve};
use prvr::featurepack::{generate_synthetic, SyntheticSpec};
use prvr::trainer::{train, TrainConfig};

fn main() -> prvr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let noise: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.05);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(60);

    let spec = SyntheticSpec {
        noise_scale: noise,
        ..SyntheticSpec::default()
    };
    let packs = generate_synthetic(&spec)?;
    let mut cfg = TrainConfig::desk(spec.feature_dim);
    cfg.train.max_epochs = epochs;
    let outcome = train(&packs.train, &packs.val, &cfg)?;
    let model = outcome.best.model()?;
    println!(
        "noise {noise}: best epoch {} of {}",
        outcome.best.epoch,
        outcome.history.len()
    );

    let acc = order_accuracy(&model, &packs.test)?;
    println!(
        "order accuracy (g = {}): frames {:.3}, moments {}, chance {:.3}",
        acc.groups,
        acc.video,
        acc.moment.map_or("n/a".into(), |m| format!("{m:.3}")),
        1.0 / acc.groups as f64
    );

    let gap = redundancy_gap(&model, &packs.test)?;
    println!(
        "cos(m_k, q) {:.3} vs cos(r_v, q) {:.3}: gap {:.3} over {} pairs",
        gap.key_moment,
        gap.redundant,
        gap.gap(),
        gap.pairs
    );

    let query = &packs.test.queries[0];
    let curve = similarity_curve(&model, &packs.test, &query.query_id, None)?;
    let span = packs.test.pairing[&query.query_id].moment_span;
    println!("{} vs {} (target frames {span:?}):", curve.query_id, curve.video_id);
    for (m, c) in curve.moments.iter().enumerate() {
        let mark = if m == curve.key { " <- key" } else { "" };
        println!("  moment {m:>2}  {c:+.3}{mark}");
    }

    let pairs = mine_pack_pairs(
        &model,
        &packs.test,
        cfg.train.batch_size,
        cfg.train.seed,
        cfg.ice.threshold,
    )?;
    println!("{} pseudo-pairs mined on the held-out pack", pairs.len());
    Ok(())
}
