//! Module ablation on the default synthetic corpus: trains the selected
//! on/off rows over several seeds and prints the seed-averaged table.
//!
//! ```text
//! cargo run --release --example ablation -- [rows] [seeds] [key=value ...]
//! ```
//! `rows` is a comma list of 1-based rows (default `1,2,3,4,8`: base, each
//! single module, everything); `seeds` is a comma list (default `0,1,2`).

use std::time::Instant;

use prvr::featurepack::{generate_synthetic, SyntheticSpec};
use prvr::trainer::{ablation_table, run_ablation, TrainConfig};
use prvr::Error;

fn list<T: std::str::FromStr>(arg: Option<String>, default: &str) -> prvr::Result<Vec<T>> {
    arg.as_deref()
        .unwrap_or(default)
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad list entry `{s}`")))
        })
        .collect()
}

fn main() -> prvr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let rows: Vec<usize> = list(args.next(), "1,2,3,4,8")?;
    let seeds: Vec<u64> = list(args.next(), "0,1,2")?;

    let spec = SyntheticSpec::default();
    let packs = generate_synthetic(&spec)?;
    let mut cfg = TrainConfig::desk(spec.feature_dim);
    for kv in args {
        cfg.apply_override(&kv)?;
    }

    let start = Instant::now();
    let table = run_ablation(&packs.train, &packs.val, &packs.test, &cfg, &rows, &seeds)?;
    print!("{}", ablation_table(&table));
    println!(
        "{} runs in {:.0}s",
        rows.len() * seeds.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
