//! The single JSON document that fully specifies a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{GridGeometry, NetworkConfig, PruneConfig};
use crate::error::{Error, Result};
use crate::tasks::{SyntheticTaskSpec, NUM_CLASSES};
use crate::trainer::{BiLevelConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub levels: usize,
    pub base_width: usize,
    pub search_blocks: bool,
    pub search_aggregation: bool,
    pub decoder_expansion: bool,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            levels: 4,
            base_width: 4,
            search_blocks: true,
            search_aggregation: true,
            decoder_expansion: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub taus: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            taus: vec![0.60, 0.75, 0.90],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Network initialization seed.
    pub seed: u64,
    pub task: SyntheticTaskSpec,
    pub network: NetworkSettings,
    pub search: BiLevelConfig,
    pub retrain: TrainConfig,
    pub prune: PruneConfig,
    pub ablation: AblationConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: SyntheticTaskSpec::default_2d(),
            network: NetworkSettings::default(),
            search: BiLevelConfig::default(),
            retrain: TrainConfig::default(),
            prune: PruneConfig::default(),
            ablation: AblationConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn config_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::config(path.display().to_string(), e.to_string())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.search.validate()?;
        self.retrain.validate()?;
        self.prune.validate()?;
        let n = &self.network;
        if n.levels < 2 {
            return Err(Error::config("network.levels", "must be at least 2"));
        }
        if n.base_width == 0 {
            return Err(Error::config("network.base_width", "must be positive"));
        }
        let factor = 1usize << (n.levels - 1);
        if self.task.extent % factor != 0 {
            return Err(Error::config(
                "task.extent",
                format!("{} is not divisible by 2^(levels-1) = {factor}", self.task.extent),
            ));
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::config("ablation.seeds", "must not be empty"));
        }
        for &t in &self.ablation.taus {
            PruneConfig::new(t).map_err(|_| Error::config("ablation.taus", format!("{t} is outside (0, 1)")))?;
        }
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            rank: self.task.rank,
            in_channels: 1,
            num_classes: NUM_CLASSES,
            geometry: GridGeometry::new(self.network.levels.max(2), self.network.base_width),
            search_blocks: self.network.search_blocks,
            search_aggregation: self.network.search_aggregation,
            decoder_expansion: self.network.decoder_expansion,
        }
    }

    /// The same run under another seed: initialization, data split,
    /// batch order and augmentation all change; the dataset does not.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.search.seed = seed;
        c.retrain.seed = seed;
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form without
    /// `paths`: where data and outputs live does not change a run.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
        }
        let bytes = serde_json::to_vec(&v).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    /// Parses a JSON document; unspecified fields, including fields of
    /// partially given optimizers, take their defaults.
    pub fn from_json_value(value: serde_json::Value, origin: &Path) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut doc, value);
        let cfg: Self = serde_json::from_value(doc).map_err(|e| config_error(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_value(path: &Path) -> Result<serde_json::Value> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| config_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_value(Self::load_value(path)?, path)
    }

    /// Writes the resolved config with its hash into `dir/config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut()
            .expect("config is an object")
            .insert("config_hash".into(), serde_json::Value::String(self.hash()));
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(&v).expect("config serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Reads a config written by [`RunConfig::write_resolved`] or by hand.
    pub fn load_resolved(path: &Path) -> Result<Self> {
        let mut v = Self::load_value(path)?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("config_hash");
        }
        Self::from_json_value(v, path)
    }
}

/// Recursively overlays `top` onto `base`; non-object values replace.
fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `dotted.path` inside a JSON document. The value is parsed as JSON
/// when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(key, "empty path segment"));
        }
        if !cur.is_object() {
            *cur = serde_json::Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("just made an object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::config(key, "empty key"))
}
