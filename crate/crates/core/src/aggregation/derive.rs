//! Discretized architectures: argmax operators per layer plus the pruned
//! edge set, serializable as JSON and exportable as Graphviz DOT.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{GateKind, Network, NetworkConfig, NetworkPlan};
use super::prune::{prune, PruneConfig};
use super::{Edge, NodeId};
use crate::error::{Error, Result};
use crate::search_space::{Candidate, CandidateSet};

pub const GRAPH_SCHEMA: &str = "agg_graph_v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedNode {
    pub stage: usize,
    pub level: usize,
    /// Chosen operator of each of the two layers.
    pub ops: [Candidate; 2],
}

impl DerivedNode {
    pub fn id(&self) -> NodeId {
        NodeId::new(self.stage, self.level)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedEdge {
    pub src: NodeId,
    pub dst: NodeId,
    /// Gate value at derivation time.
    pub gate: f64,
    #[serde(default)]
    pub forced: bool,
}

impl DerivedEdge {
    pub fn edge(&self) -> Edge {
        Edge::new(self.src, self.dst)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedArchitecture {
    pub schema: String,
    pub network: NetworkConfig,
    pub tau: f64,
    pub nodes: Vec<DerivedNode>,
    pub edges: Vec<DerivedEdge>,
    pub dropped: Vec<DerivedEdge>,
    /// Hash of the run config that produced the architecture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Prunes the searched gates at `cfg.tau` and takes the argmax operator of
/// every surviving block.
pub fn derive_architecture(net: &Network, cfg: &PruneConfig) -> Result<DerivedArchitecture> {
    let geom = net.geometry();
    let outcome = prune(&geom, &net.gates(), cfg)?;
    let active = outcome.active_nodes(&geom);
    let nodes = active
        .iter()
        .map(|&id| {
            let sbb = &net.blocks()[&id];
            let [a, b] = sbb.layers();
            DerivedNode {
                stage: id.stage,
                level: id.level,
                ops: [a.selected(net.store()), b.selected(net.store())],
            }
        })
        .collect();
    let to_derived = |g: &super::GatedEdge| DerivedEdge {
        src: g.edge.src,
        dst: g.edge.dst,
        gate: g.gate,
        forced: outcome.forced.contains(&g.edge),
    };
    Ok(DerivedArchitecture {
        schema: GRAPH_SCHEMA.to_string(),
        network: net.config().clone(),
        tau: cfg.tau,
        nodes,
        edges: outcome.kept.iter().map(to_derived).collect(),
        dropped: outcome.dropped.iter().map(to_derived).collect(),
        config_hash: None,
    })
}

impl DerivedArchitecture {
    /// Singleton operator sets and hard-wired gates.
    pub fn plan(&self) -> NetworkPlan {
        let nodes: BTreeMap<NodeId, [CandidateSet; 2]> = self
            .nodes
            .iter()
            .map(|n| (n.id(), n.ops.map(CandidateSet::singleton)))
            .collect();
        let edges = self.edges.iter().map(|e| (e.edge(), GateKind::Fixed)).collect();
        NetworkPlan { nodes, edges }
    }

    /// A freshly initialized discrete network for this architecture.
    pub fn instantiate(&self, seed: u64) -> Result<Network> {
        Network::build(&self.network, self.plan(), seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let arch: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if arch.schema != GRAPH_SCHEMA {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("schema `{}`, expected `{GRAPH_SCHEMA}`", arch.schema),
            });
        }
        Ok(arch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Graphviz rendering: nodes ranked by stage, forced edges dashed.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph aggregation {\n  rankdir=LR;\n  node [shape=box];\n");
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "  label=\"config {h}\";");
        }
        let stem = NodeId::new(0, 0);
        let _ = writeln!(s, "  \"{stem}\" [label=\"{stem}\\nstem\"];");
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "  \"{}\" [label=\"{}\\n{} | {}\"];",
                n.id(),
                n.id(),
                n.ops[0],
                n.ops[1]
            );
        }
        for e in &self.edges {
            let style = if e.forced { ", style=dashed" } else { "" };
            let _ = writeln!(s, "  \"{}\" -> \"{}\" [label=\"{:.3}\"{style}];", e.src, e.dst, e.gate);
        }
        s.push_str("}\n");
        s
    }
}
