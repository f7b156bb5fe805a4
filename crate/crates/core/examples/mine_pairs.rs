//! Mines pseudo-positive (moment, text) pairs from a random batch of
//! similarities and shows which cells survive masking and thresholding.
//!
//! ```text
//! cargo run --example mine_pairs -- [batch] [moments] [threshold] [seed]
//! ```

use ndarray::Array2;
use prvr::ice::{mask_paired, mine_pseudo_pairs, MiningInput, DEFAULT_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> prvr::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let n: usize = arg(0).and_then(|a| a.parse().ok()).unwrap_or(4);
    let t_m: usize = arg(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let threshold: f64 = arg(2).and_then(|a| a.parse().ok()).unwrap_or(DEFAULT_THRESHOLD);
    let seed: u64 = arg(3).and_then(|a| a.parse().ok()).unwrap_or(0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sims = Array2::from_shape_fn((n * t_m, n), |_| rng.random_range(-1.0..1.0));
    let owner: Vec<usize> = (0..n * t_m).map(|r| r / t_m).collect();
    let masked = mask_paired(&sims, &owner);
    let pairs = mine_pseudo_pairs(&MiningInput::new(masked.clone(), owner.clone())?.with_threshold(threshold));

    println!("moment rows x texts (own video masked to -1):");
    for (r, row) in masked.rows().into_iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let mark = if pairs.iter().any(|p| p.moment_row == r && p.text_col == c) {
                    '*'
                } else {
                    ' '
                };
                format!("{s:>6.2}{mark}")
            })
            .collect();
        println!("  v{} m{} {}", owner[r], r % t_m, cells.join(""));
    }
    println!("{} pairs at threshold {threshold}:", pairs.len());
    for p in &pairs {
        println!(
            "  moment {} of video {} <-> text {} ({:.3})",
            p.moment_row % t_m,
            owner[p.moment_row],
            p.text_col,
            p.similarity
        );
    }
    Ok(())
}
