//! Trains briefly, saves the best checkpoint, reloads it and ranks the
//! test videos for one query.
//!
//! ```text
//! cargo run --release --example checkpoint_eval -- [epochs] [alpha]
//! ```

use prvr::eval::evaluate;
use prvr::featurepack::{generate_synthetic, SyntheticSpec};
use prvr::trainer::{load_checkpoint, save_checkpoint, train, TrainConfig};

fn main() -> prvr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let alpha: Option<f64> = args.next().and_then(|a| a.parse().ok());

    let spec = SyntheticSpec {
        num_videos: 80,
        ..SyntheticSpec::default()
    };
    let packs = generate_synthetic(&spec)?;
    let mut cfg = TrainConfig::desk(spec.feature_dim);
    cfg.train.max_epochs = epochs;
    cfg.train.early_stop_patience = cfg.train.early_stop_patience.min(epochs.max(1));

    let outcome = train(&packs.train, &packs.val, &cfg)?;
    let dir = tempfile::tempdir().expect("temporary directory");
    save_checkpoint(&outcome.best, dir.path())?;
    let ckpt = load_checkpoint(dir.path())?;
    println!(
        "checkpoint from epoch {} reloaded from {}",
        ckpt.epoch,
        dir.path().display()
    );

    let alpha = alpha.unwrap_or(ckpt.train_config.eval.alpha);
    let eval = evaluate(&ckpt.model()?, &packs.test, alpha)?;
    print!("{}", eval.report.table());

    let result = &eval.results[0];
    let target = &packs.test.pairing[&result.query_id].video_id;
    println!(
        "query {} (target {target}, rank {}):",
        result.query_id, result.rank_of_target
    );
    for (i, (vid, score)) in result.ranking.iter().take(5).enumerate() {
        println!(
            "  {:>2}. {vid} {score:.3}{}",
            i + 1,
            if vid == target { "  <- target" } else { "" }
        );
    }
    Ok(())
}
