use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prvr::featurepack::{read_pack, write_pack, FeaturePack};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TINY: &[&str] = &[
    "--set",
    "encoder.d_model=16",
    "--set",
    "encoder.num_heads=2",
    "--set",
    "encoder.ff_dim=32",
    "--set",
    "encoder.moment_count=4",
    "--set",
    "tcp.groups=4",
    "--set",
    "train.batch_size=8",
    "--set",
    "train.max_epochs=2",
    "--set",
    "train.early_stop_patience=2",
];

fn prvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prvr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = prvr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn gen_tiny(out: &Path) {
    ok(&[
        "gen-data",
        "--out",
        s(out),
        "--num-videos",
        "16",
        "--moments-per-video",
        "2",
        "--frames-per-moment",
        "4",
        "--feature-dim",
        "8",
    ]);
}

/// Synthetic packs plus a tiny trained checkpoint.
fn trained() -> (TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend_from_slice(TINY);
    ok(&args);
    (dir, data, run)
}

fn digest_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let hash = Sha256::digest(fs::read(&path).unwrap()).to_vec();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), hash);
            }
        }
    }
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen_tiny(&a);
    gen_tiny(&b);
    let (da, db) = (digest_tree(&a), digest_tree(&b));
    assert!(da.len() >= 3);
    assert_eq!(da, db);
}

#[test]
fn unknown_flags_fail_with_usage() {
    let out = prvr(&["eval", "--bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");

    let out = prvr(&["train", "--data", "/nonexistent", "--out", "/nonexistent/run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn train_writes_artifacts_and_checkpoint_drives_every_probe() {
    let (dir, data, run) = trained();
    for f in ["config.json", "metrics.csv", "checkpoint", "last"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("checkpoint");
    let test = data.join("test");

    let eval = ok(&["eval", "--checkpoint", s(&ckpt), "--pack", s(&test)]);
    let report: serde_json::Value = serde_json::from_str(eval.lines().next().unwrap()).unwrap();
    assert!(report["SumR"].as_f64().unwrap() <= 400.0);

    // A one-query, one-video pack always ranks its target first.
    let pack = read_pack(&test).unwrap();
    let q = pack.queries[0].clone();
    let vid = &pack.pairing[&q.query_id].video_id;
    let single = FeaturePack {
        videos: pack.videos.iter().filter(|v| &v.video_id == vid).cloned().collect(),
        pairing: [(q.query_id.clone(), pack.pairing[&q.query_id].clone())].into(),
        queries: vec![q.clone()],
        ..pack.clone()
    };
    let single_dir = dir.path().join("single");
    write_pack(&single, &single_dir).unwrap();
    let eval = ok(&["eval", "--checkpoint", s(&ckpt), "--pack", s(&single_dir)]);
    let report: serde_json::Value = serde_json::from_str(eval.lines().next().unwrap()).unwrap();
    for k in ["R@1", "R@5", "R@10", "R@100"] {
        assert_eq!(report[k].as_f64(), Some(100.0));
    }
    assert_eq!(report["SumR"].as_f64(), Some(400.0));

    let pairs = ok(&[
        "mine-pairs",
        "--checkpoint",
        s(&ckpt),
        "--pack",
        s(&data.join("train")),
        "--threshold",
        "-1",
    ]);
    let mut lines = pairs.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,batch,moment_row,text_col,similarity,video_id,moment,query_id")
    );
    let train = read_pack(&data.join("train")).unwrap();
    let mut mined = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_ne!(train.pairing[cols[7]].video_id, cols[5]);
        mined += 1;
    }
    assert!(mined > 0);

    let order = ok(&["predict-order", "--checkpoint", s(&ckpt), "--pack", s(&test)]);
    let order: serde_json::Value = serde_json::from_str(order.trim()).unwrap();
    assert_eq!(order["groups"].as_u64(), Some(4));
    assert_eq!(order["chance"].as_f64(), Some(0.25));
    assert!((0.0..=1.0).contains(&order["video_accuracy"].as_f64().unwrap()));

    let curve = ok(&[
        "sim-curve",
        "--checkpoint",
        s(&ckpt),
        "--pack",
        s(&test),
        "--query",
        &q.query_id,
    ]);
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.split(',').nth(2) == Some("1")).count(), 1);
}

#[test]
fn ablate_reports_every_requested_row() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_tiny(&data);
    let json = dir.path().join("rows.json");
    let mut args = vec!["ablate", "--data", s(&data), "--seeds", "0", "--json", s(&json)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "train.max_epochs=1", "--set", "train.early_stop_patience=1"]);
    ok(&args);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 8);
}
