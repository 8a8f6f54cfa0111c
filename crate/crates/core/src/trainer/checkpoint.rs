//! Checkpoint directories: `manifest.json` plus one tensor file per
//! parameter and per optimizer moment.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::metrics::EpochSummary;
use crate::aggregation::{Edge, GateKind, Network, NetworkConfig, NetworkPlan, NodeId};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::search_space::CandidateSet;
use crate::tensor::{read_tensor_file, write_tensor_file, TensorPayload};

pub const CHECKPOINT_FORMAT: &str = "agg_checkpoint_v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanNode {
    pub stage: usize,
    pub level: usize,
    /// Candidate sets in alpha order.
    pub sets: [CandidateSet; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub gate: GateKind,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub m: String,
    pub v: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub name: String,
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    /// `search` or `retrain`.
    pub kind: String,
    pub config_hash: String,
    pub network: NetworkConfig,
    pub nodes: Vec<PlanNode>,
    pub edges: Vec<PlanEdge>,
    pub epoch: usize,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub optimizers: Vec<OptimizerEntry>,
    pub history: Vec<EpochSummary>,
    #[serde(default)]
    pub run_config: serde_json::Value,
}

/// Everything a checkpoint directory holds, in memory.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub network: Network,
    pub optimizers: Vec<(String, Adam)>,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochSummary>,
    pub run_config: serde_json::Value,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["params", "adam"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let store = self.network.store();
        let mut params = Vec::new();
        for (_, p) in store.iter() {
            let file = format!("params/{}.agt", p.name);
            write_tensor_file(&dir.join(&file), &TensorPayload::Float(p.value.clone()))?;
            params.push(ParamEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                file,
            });
        }
        let mut optimizers = Vec::new();
        for (name, adam) in &self.optimizers {
            let mut moments = Vec::new();
            for (id, m, v) in adam.moments() {
                let pname = &store.get(id).name;
                let entry = MomentEntry {
                    name: pname.clone(),
                    m: format!("adam/{name}.{pname}.m.agt"),
                    v: format!("adam/{name}.{pname}.v.agt"),
                };
                write_tensor_file(&dir.join(&entry.m), &TensorPayload::Float(m.clone()))?;
                write_tensor_file(&dir.join(&entry.v), &TensorPayload::Float(v.clone()))?;
                moments.push(entry);
            }
            optimizers.push(OptimizerEntry {
                name: name.clone(),
                config: adam.config,
                step: adam.step_count(),
                moments,
            });
        }
        let plan = self.network.plan();
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            kind: self.kind.clone(),
            config_hash: self.config_hash.clone(),
            network: self.network.config().clone(),
            nodes: plan
                .nodes
                .iter()
                .map(|(n, sets)| PlanNode {
                    stage: n.stage,
                    level: n.level,
                    sets: sets.clone(),
                })
                .collect(),
            edges: plan
                .edges
                .iter()
                .map(|(e, g)| PlanEdge {
                    src: e.src,
                    dst: e.dst,
                    gate: *g,
                })
                .collect(),
            epoch: self.epoch,
            step: self.step,
            params,
            optimizers,
            history: self.history.clone(),
            run_config: self.run_config.clone(),
        };
        write_json(&Self::manifest_path(dir), &manifest)
    }

    pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
        let path = Self::manifest_path(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.clone(),
            source,
        })?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::Corrupt {
                path,
                reason: format!("format `{}`, expected `{CHECKPOINT_FORMAT}`", m.format),
            });
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Self::load_manifest(dir)?;
        let mpath = Self::manifest_path(dir);
        let corrupt = |reason: String| Error::Corrupt {
            path: mpath.clone(),
            reason,
        };
        let plan = NetworkPlan {
            nodes: m
                .nodes
                .iter()
                .map(|n| (NodeId::new(n.stage, n.level), n.sets.clone()))
                .collect::<BTreeMap<_, _>>(),
            edges: m.edges.iter().map(|e| (Edge::new(e.src, e.dst), e.gate)).collect(),
        };
        let mut network = Network::build(&m.network, plan, 0).map_err(|e| corrupt(e.to_string()))?;
        if network.store().len() != m.params.len() {
            return Err(corrupt(format!(
                "{} parameters listed, the architecture has {}",
                m.params.len(),
                network.store().len()
            )));
        }
        for entry in &m.params {
            let id = network
                .store()
                .find(&entry.name)
                .ok_or_else(|| corrupt(format!("unknown parameter `{}`", entry.name)))?;
            let path = dir.join(&entry.file);
            let value = read_tensor_file(&path)?.into_float(&path)?;
            let expect = network.store().value(id).shape().to_vec();
            if value.shape() != &expect[..] || network.store().get(id).group != entry.group {
                return Err(Error::Corrupt {
                    path,
                    reason: format!("`{}` has shape {:?}, expected {expect:?}", entry.name, value.shape()),
                });
            }
            if !value.all_finite() {
                return Err(Error::Corrupt {
                    path,
                    reason: format!("`{}` holds non-finite values", entry.name),
                });
            }
            *network.store_mut().value_mut(id) = value;
        }
        let mut optimizers = Vec::new();
        for o in &m.optimizers {
            let mut moments = Vec::new();
            for e in &o.moments {
                let id = network
                    .store()
                    .find(&e.name)
                    .ok_or_else(|| corrupt(format!("moment for unknown parameter `{}`", e.name)))?;
                let (mp, vp) = (dir.join(&e.m), dir.join(&e.v));
                let mt = read_tensor_file(&mp)?.into_float(&mp)?;
                let vt = read_tensor_file(&vp)?.into_float(&vp)?;
                moments.push((id, mt, vt));
            }
            let mut adam = Adam::new(o.config);
            adam.restore(o.step, moments);
            optimizers.push((o.name.clone(), adam));
        }
        Ok(Self {
            kind: m.kind,
            config_hash: m.config_hash,
            network,
            optimizers,
            epoch: m.epoch,
            step: m.step,
            history: m.history,
            run_config: m.run_config,
        })
    }

    pub fn optimizer(&self, name: &str) -> Option<&Adam> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }
}
