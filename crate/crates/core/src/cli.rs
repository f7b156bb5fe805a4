//! Command-line surface. The `prvr` binary parses [`Cli`] and hands it to
//! [`run`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::diagnostics::{mine_pack_pairs, order_accuracy, similarity_curve};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::featurepack::{generate_synthetic, read_pack, write_pack, FeaturePack, SyntheticSpec};
use crate::trainer::{
    ablation_table, load_checkpoint, run_ablation, save_checkpoint, train, write_metrics_csv, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "prvr",
    version,
    about = "Partially relevant video retrieval: data, training and diagnostics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/val/test packs under OUT.
    GenData(GenData),
    /// Train on DATA/train with early stopping on DATA/val.
    Train(Train),
    /// Score a checkpoint on a pack.
    Eval(Eval),
    /// Run the module on/off matrix and print the comparison table.
    Ablate(Ablate),
    /// Dump the pseudo-pairs a checkpoint mines on a pack.
    MinePairs(MinePairs),
    /// Group-label accuracy of the temporal-order heads on a pack.
    PredictOrder(PredictOrder),
    /// Per-moment cosine curve of one query against one video.
    SimCurve(SimCurve),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub num_concepts: usize,
    #[arg(long, default_value_t = 200)]
    pub num_videos: usize,
    #[arg(long, default_value_t = 4)]
    pub moments_per_video: usize,
    #[arg(long, default_value_t = 8)]
    pub frames_per_moment: usize,
    #[arg(long, default_value_t = 2)]
    pub queries_per_video: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    pub shared_concept_rate: f64,
    #[arg(long, default_value_t = 0.5)]
    pub redundant_moment_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 6)]
    pub words_per_query: usize,
}

impl GenData {
    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_concepts: self.num_concepts,
            num_videos: self.num_videos,
            moments_per_video: self.moments_per_video,
            frames_per_moment: self.frames_per_moment,
            queries_per_video: self.queries_per_video,
            noise_scale: self.noise_scale,
            shared_concept_rate: self.shared_concept_rate,
            redundant_moment_rate: self.redundant_moment_rate,
            seed: self.seed,
            feature_dim: self.feature_dim,
            words_per_query: self.words_per_query,
        }
    }
}

/// Config assembly shared by `train` and `ablate`: the desk preset sized to
/// the training pack, then the config file, then `--set` overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config with flat dotted (or nested) keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, repeatable, e.g. `--set train.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self, train_pack: &FeaturePack) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk(train_pack.meta.feature_dim_video);
        cfg.encoder.feature_dim_text = train_pack.meta.feature_dim_text;
        if let Some(path) = &self.config {
            cfg.overlay_file(path)?;
        }
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct Train {
    /// Directory holding `train/` and `val/` packs.
    #[arg(long)]
    pub data: PathBuf,
    /// Receives `checkpoint/` (best), `last/`, `metrics.csv` and `config.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pack: PathBuf,
    /// Moment-level weight of the fused score; the checkpoint's value when
    /// omitted.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write the metric JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Ablate {
    /// Directory holding `train/`, `val/` and `test/` packs.
    #[arg(long)]
    pub data: PathBuf,
    /// 1-based rows of the matrix, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    pub rows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    /// Also write the per-seed reports as JSON here.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct MinePairs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pack: PathBuf,
    /// Mining threshold; the checkpoint's value when omitted.
    #[arg(long, allow_negative_numbers = true)]
    pub threshold: Option<f64>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictOrder {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pack: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimCurve {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pack: PathBuf,
    #[arg(long)]
    pub query: String,
    /// Video to score against; the query's paired video when omitted.
    #[arg(long)]
    pub video: Option<String>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::Ablate(a) => ablate_cmd(&a, out),
        Command::MinePairs(a) => mine_pairs_cmd(&a, out),
        Command::PredictOrder(a) => predict_order_cmd(&a, out),
        Command::SimCurve(a) => sim_curve_cmd(&a, out),
    }
}

fn stdout_error(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn gen_data(a: &GenData, out: &mut dyn Write) -> Result<()> {
    let packs = generate_synthetic(&a.spec())?;
    for (name, pack) in [("train", &packs.train), ("val", &packs.val), ("test", &packs.test)] {
        let dir = a.out.join(name);
        write_pack(pack, &dir)?;
        writeln!(
            out,
            "{name}: {} videos, {} queries -> {}",
            pack.videos.len(),
            pack.queries.len(),
            dir.display()
        )
        .map_err(stdout_error)?;
    }
    Ok(())
}

fn train_cmd(a: &Train, out: &mut dyn Write) -> Result<()> {
    let train_pack = read_pack(&a.data.join("train"))?;
    let val_pack = read_pack(&a.data.join("val"))?;
    let cfg = a.config.resolve(&train_pack)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    cfg.save(&a.out.join("config.json"))?;
    let outcome = train(&train_pack, &val_pack, &cfg)?;
    save_checkpoint(&outcome.best, &a.out.join("checkpoint"))?;
    save_checkpoint(&outcome.last, &a.out.join("last"))?;
    write_metrics_csv(&outcome.history, &a.out.join("metrics.csv"))?;
    info!(
        "ICE pairs {} (mask violations {})",
        outcome.ice_pairs(),
        outcome.ice_violations()
    );
    writeln!(
        out,
        "{} epochs, best epoch {} (val SumR {:.1}) -> {}",
        outcome.history.len(),
        outcome.best.epoch,
        outcome.best.best_sum_r.unwrap_or(f64::NAN),
        a.out.display()
    )
    .map_err(stdout_error)
}

fn eval_cmd(a: &Eval, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let pack = read_pack(&a.pack)?;
    let alpha = a.alpha.unwrap_or(ckpt.train_config.eval.alpha);
    let report = evaluate(&ckpt.model()?, &pack, alpha)?.report;
    let json = serde_json::to_string(&report).expect("report serializes");
    if let Some(path) = &a.json {
        fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
    }
    writeln!(out, "{json}").map_err(stdout_error)?;
    write!(out, "{}", report.table()).map_err(stdout_error)
}

fn ablate_cmd(a: &Ablate, out: &mut dyn Write) -> Result<()> {
    let train_pack = read_pack(&a.data.join("train"))?;
    let val_pack = read_pack(&a.data.join("val"))?;
    let test_pack = read_pack(&a.data.join("test"))?;
    let cfg = a.config.resolve(&train_pack)?;
    let rows = run_ablation(&train_pack, &val_pack, &test_pack, &cfg, &a.rows, &a.seeds)?;
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    }
    write!(out, "{}", ablation_table(&rows)).map_err(stdout_error)
}

fn csv_sink<'a>(path: Option<&Path>, out: &'a mut dyn Write) -> Result<csv::Writer<Box<dyn Write + 'a>>> {
    let sink: Box<dyn Write + 'a> = match path {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(out),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn csv_fail(e: csv::Error) -> Error {
    Error::InvalidInput(format!("writing CSV: {e}"))
}

fn mine_pairs_cmd(a: &MinePairs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let pack = read_pack(&a.pack)?;
    let cfg = &ckpt.train_config;
    let threshold = a.threshold.unwrap_or(cfg.ice.threshold);
    let pairs = mine_pack_pairs(&ckpt.model()?, &pack, cfg.train.batch_size, cfg.train.seed, threshold)?;
    let mut w = csv_sink(a.out.as_deref(), out)?;
    w.write_record([
        "epoch",
        "batch",
        "moment_row",
        "text_col",
        "similarity",
        "video_id",
        "moment",
        "query_id",
    ])
    .map_err(csv_fail)?;
    for p in &pairs {
        w.write_record([
            ckpt.epoch.to_string(),
            p.batch.to_string(),
            p.moment_row.to_string(),
            p.text_col.to_string(),
            p.similarity.to_string(),
            p.video_id.clone(),
            p.moment.to_string(),
            p.query_id.clone(),
        ])
        .map_err(csv_fail)?;
    }
    w.flush().map_err(stdout_error)
}

fn predict_order_cmd(a: &PredictOrder, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let pack = read_pack(&a.pack)?;
    let acc = order_accuracy(&ckpt.model()?, &pack)?;
    let json = serde_json::json!({
        "epoch": ckpt.epoch,
        "groups": acc.groups,
        "videos": acc.videos,
        "video_accuracy": acc.video,
        "moment_accuracy": acc.moment,
        "chance": 1.0 / acc.groups as f64,
    });
    writeln!(out, "{json}").map_err(stdout_error)
}

fn sim_curve_cmd(a: &SimCurve, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let pack = read_pack(&a.pack)?;
    let curve = similarity_curve(&ckpt.model()?, &pack, &a.query, a.video.as_deref())?;
    let mut w = csv_sink(a.out.as_deref(), out)?;
    w.write_record(["moment", "cosine", "key", "video_cosine", "redundant_cosine"])
        .map_err(csv_fail)?;
    for (m, c) in curve.moments.iter().enumerate() {
        w.write_record([
            m.to_string(),
            c.to_string(),
            u8::from(m == curve.key).to_string(),
            curve.video.to_string(),
            curve.redundant.to_string(),
        ])
        .map_err(csv_fail)?;
    }
    w.flush().map_err(stdout_error)
}
