//! Training configuration and its flat dotted-key JSON form.
//!
//! A config file is one JSON object whose keys name fields by path, e.g.
//! `{"train.learning_rate": 0.001, "encoder.d_model": 64}`. Missing keys
//! keep their defaults; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_ALPHA;
use crate::ice::DEFAULT_THRESHOLD;
use crate::irm::IrmConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::tcp::TcpConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Train32,
    Check64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 2.5e-4,
            batch_size: 128,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            precision: Precision::Train32,
        }
    }
}

/// Which auxiliary modules join the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleSwitches {
    pub ice: bool,
    pub irm: bool,
    pub tcp: bool,
}

impl Default for ModuleSwitches {
    fn default() -> Self {
        Self::all()
    }
}

impl ModuleSwitches {
    pub const fn all() -> Self {
        ModuleSwitches {
            ice: true,
            irm: true,
            tcp: true,
        }
    }

    pub const fn none() -> Self {
        ModuleSwitches {
            ice: false,
            irm: false,
            tcp: false,
        }
    }

    /// `base`, or the enabled modules joined with `+`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.ice, "ice"), (self.irm, "irm"), (self.tcp, "tcp")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "base".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModuleWeights {
    pub ice: f64,
    pub irm: f64,
    pub tcp: f64,
}

impl Default for ModuleWeights {
    fn default() -> Self {
        ModuleWeights {
            ice: 1.0,
            irm: 1.0,
            tcp: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IceConfig {
    pub threshold: f64,
    /// Epochs (from the start) during which ICE stays off.
    pub warmup_epochs: usize,
}

impl Default for IceConfig {
    fn default() -> Self {
        IceConfig {
            threshold: DEFAULT_THRESHOLD,
            warmup_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { alpha: DEFAULT_ALPHA }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub train: OptimConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub modules: ModuleSwitches,
    pub weights: ModuleWeights,
    pub ice: IceConfig,
    pub irm: IrmConfig,
    pub tcp: TcpConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    /// Small model for synthetic packs of feature dimension `feature_dim`.
    /// The order-prediction loss starts near `4·ln g`, far above the
    /// retrieval terms, so it is down-weighted to 0.1 here.
    pub fn desk(feature_dim: usize) -> Self {
        TrainConfig {
            train: OptimConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                max_epochs: 60,
                ..OptimConfig::default()
            },
            encoder: EncoderConfig {
                d_model: 64,
                moment_count: 8,
                num_heads: 4,
                ff_dim: 128,
                dropout: 0.1,
                max_positions: 128,
                feature_dim_video: feature_dim,
                feature_dim_text: feature_dim,
                ..EncoderConfig::default()
            },
            weights: ModuleWeights {
                tcp: 0.1,
                ..ModuleWeights::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            shared_redundancy_head: self.irm.shared_head,
            tcp_groups: self.tcp.groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.tcp.validate()?;
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(
                "train.learning_rate must be finite and non-negative".into(),
            ));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if t.early_stop_patience == 0 || (t.max_epochs > 0 && t.early_stop_patience > t.max_epochs) {
            return Err(Error::Config(
                "train.early_stop_patience must lie in 1..=max_epochs".into(),
            ));
        }
        let w = &self.weights;
        if [w.ice, w.irm, w.tcp].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("module weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.alpha) {
            return Err(Error::Config("eval.alpha must lie in [0, 1]".into()));
        }
        if self.tcp.moment_branch && self.tcp.groups > self.encoder.moment_count {
            return Err(Error::Config(format!(
                "tcp.groups ({}) exceeds encoder.moment_count ({})",
                self.tcp.groups, self.encoder.moment_count
            )));
        }
        Ok(())
    }

    /// Every field as `dotted.key → value`.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in flat {
            cfg.set(k, v.clone())?;
        }
        Ok(cfg)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        if node.is_object() {
            return Err(Error::Config(format!("`{key}` names a section, not a field")));
        }
        *node = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("bad value for `{key}`: {e}")))?;
        Ok(())
    }

    /// Applies a `key=value` override; the value is read as JSON when it
    /// parses, otherwise as a string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.set(key.trim(), value)
    }

    /// Reads a flat (or nested) JSON config; nested objects are flattened
    /// first.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.overlay_file(path)?;
        Ok(cfg)
    }

    /// Sets every key present in a config file, keeping the others.
    pub fn overlay_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !value.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        let mut flat = BTreeMap::new();
        flatten("", &value, &mut flat);
        for (k, v) in flat {
            self.set(&k, v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: Map<String, Value> = self.to_flat().into_iter().collect();
        let text = serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}
