//! Run configuration: defaults, JSON config file (nested or flat dotted
//! keys), `--set key=value` overrides, then convenience flags. The effective
//! config is echoed before any command runs.

use serde::{Deserialize, Serialize};
use sgg_core::arm::BiasMode;
use sgg_core::error::{Error, Result};
use sgg_core::synth::GenConfig;
use sgg_core::trainer::TrainConfig;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.7,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: String,
    pub ks: Vec<usize>,
    pub graph_constraint: bool,
    pub k_per_pair: usize,
    /// Evaluate external predictions (JSONL) instead of running the model.
    pub predictions: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: "predcls".into(),
            ks: vec![20, 50, 100],
            graph_constraint: true,
            k_per_pair: 1,
            predictions: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub corpus: String,
    pub features: String,
    pub vocab: String,
    pub weights: String,
    pub loss_csv: String,
    pub report_json: String,
    pub report_txt: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("."),
            corpus: "corpus.jsonl".into(),
            features: "features.jsonl".into(),
            vocab: "vocab.json".into(),
            weights: "weights.json".into(),
            loss_csv: "loss.csv".into(),
            report_json: "report.json".into(),
            report_txt: "report.txt".into(),
        }
    }
}

impl Paths {
    pub fn corpus(&self) -> PathBuf {
        self.out_dir.join(&self.corpus)
    }
    pub fn features(&self) -> PathBuf {
        self.out_dir.join(&self.features)
    }
    pub fn vocab(&self) -> PathBuf {
        self.out_dir.join(&self.vocab)
    }
    pub fn weights(&self) -> PathBuf {
        self.out_dir.join(&self.weights)
    }
    pub fn loss_csv(&self) -> PathBuf {
        self.out_dir.join(&self.loss_csv)
    }
    pub fn report_json(&self) -> PathBuf {
        self.out_dir.join(&self.report_json)
    }
    pub fn report_txt(&self) -> PathBuf {
        self.out_dir.join(&self.report_txt)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed. When set it drives the generator, split, and trainer
    /// seeds (offset per stage); the per-stage values still win if set
    /// explicitly afterwards via `--set`.
    pub seed: Option<u64>,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
    pub arm_bias: BiasMode,
    /// Worker-thread cap; 0 or absent leaves the default pool.
    pub threads: Option<usize>,
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults, overlaid with the config file (if any) and `--set` pairs.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut value =
            serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            let object = overlay.as_object().ok_or_else(|| {
                Error::Config(format!("{}: config root must be a JSON object", path.display()))
            })?;
            for (key, val) in object {
                merge_dotted(&mut value, key, val.clone())?;
            }
        }
        for pair in sets {
            let (key, raw) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects key=value, got {pair:?}"))
            })?;
            // Values parse as JSON when they can, otherwise as strings.
            let val = serde_json::from_str(raw)
                .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            merge_dotted(&mut value, key, val)?;
        }
        let mut config: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        config.apply_master_seed();
        Ok(config)
    }

    fn apply_master_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.gen.seed = seed;
            self.split.seed = seed.wrapping_add(1);
            self.train.seed = seed.wrapping_add(2);
        }
    }

    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Merges `val` into `root` at a dotted path, creating objects on the way.
fn merge_dotted(root: &mut serde_json::Value, key: &str, val: serde_json::Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("config key {key:?} crosses a non-object")))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let last = parts.last().expect("split yields at least one part");
    match (node.get_mut(*last), &val) {
        // Nested objects merge key-by-key instead of replacing wholesale.
        (Some(serde_json::Value::Object(_)), serde_json::Value::Object(overlay)) => {
            for (k, v) in overlay {
                merge_dotted(node.get_mut(*last).unwrap(), k, v.clone())?;
            }
        }
        _ => {
            node.as_object_mut()
                .ok_or_else(|| Error::Config(format!("config key {key:?} crosses a non-object")))?
                .insert(last.to_string(), val);
        }
    }
    Ok(())
}
