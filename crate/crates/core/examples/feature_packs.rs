//! Writes the synthetic train/val/test packs to disk, reads them back and
//! prints their shapes.
//!
//! ```text
//! cargo run --example feature_packs -- [out_dir]
//! ```

use std::path::PathBuf;

use prvr::featurepack::{generate_synthetic, read_pack, write_pack, SyntheticSpec};

fn main() -> prvr::Result<()> {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());

    let spec = SyntheticSpec {
        num_videos: 40,
        ..SyntheticSpec::default()
    };
    let packs = generate_synthetic(&spec)?;
    for (name, pack) in [("train", &packs.train), ("val", &packs.val), ("test", &packs.test)] {
        let dir = root.join(name);
        write_pack(pack, &dir)?;
        let back = read_pack(&dir)?;
        assert_eq!(&back, pack, "round trip changed the {name} pack");
        let frames: usize = back.videos.iter().map(|v| v.frames.nrows()).sum();
        println!(
            "{name:>5}: {:>3} videos ({frames} frames, dim {}), {:>3} queries (dim {}) -> {}",
            back.videos.len(),
            back.meta.feature_dim_video,
            back.queries.len(),
            back.meta.feature_dim_text,
            dir.display()
        );
    }
    let q = &packs.test.queries[0];
    println!(
        "query {} pairs with video {}",
        q.query_id, packs.test.pairing[&q.query_id].video_id
    );
    Ok(())
}
