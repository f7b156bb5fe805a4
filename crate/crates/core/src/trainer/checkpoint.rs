//! Checkpoint directories: `manifest.json` plus one headerless `f32le` file
//! per parameter array, laid out like a feature pack.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurepack::{read_array, write_array, DTYPE, MANIFEST_FILE};
use crate::model::{ModelConfig, PrvrModel};
use crate::nn::ParamStore;

use super::config::TrainConfig;

const FORMAT: &str = "prvr-checkpoint";
const VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// Epochs completed when the parameters were taken (0 = initialisation).
    pub epoch: usize,
    pub best_sum_r: Option<f64>,
    /// Trainer streams: batching/shuffling first, dropout second.
    pub rng: Vec<RngState>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<PrvrModel<f32>> {
        PrvrModel::with_params(self.model_config.clone(), self.params.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    path: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    model_config: ModelConfig,
    train_config: serde_json::Map<String, serde_json::Value>,
    epoch: usize,
    best_sum_r: Option<f64>,
    rng: Vec<RngState>,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(ckpt.params.len());
    for (i, (name, arr)) in ckpt.params.iter().enumerate() {
        let path = format!("params/{i:04}.f32");
        write_array(dir, &path, arr)?;
        params.push(ParamEntry {
            name: name.to_string(),
            path,
            shape: vec![arr.nrows(), arr.ncols()],
            dtype: DTYPE.into(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.to_flat().into_iter().collect(),
        epoch: ckpt.epoch,
        best_sum_r: ckpt.best_sum_r,
        rng: ckpt.rng.clone(),
        params,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |message: String| Error::Manifest {
        path: path.clone(),
        message,
    };
    let m: Manifest = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if m.format != FORMAT {
        return Err(bad(format!("format `{}` is not `{FORMAT}`", m.format)));
    }
    if m.version != VERSION {
        return Err(bad(format!("unsupported version {}", m.version)));
    }
    let mut params = ParamStore::new();
    for e in &m.params {
        if e.dtype != DTYPE {
            return Err(bad(format!("parameter `{}` has dtype `{}`", e.name, e.dtype)));
        }
        if params.id_of(&e.name).is_some() {
            return Err(bad(format!("duplicate parameter `{}`", e.name)));
        }
        params.add(e.name.clone(), read_array(dir, &e.path, &e.shape)?);
    }
    let train_config = TrainConfig::from_flat(&m.train_config.into_iter().collect())?;
    let ckpt = Checkpoint {
        model_config: m.model_config,
        train_config,
        epoch: m.epoch,
        best_sum_r: m.best_sum_r,
        rng: m.rng,
        params,
    };
    // Layout check against the declared architecture.
    ckpt.model()?;
    Ok(ckpt)
}
