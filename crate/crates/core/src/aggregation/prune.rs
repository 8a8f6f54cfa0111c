//! Threshold pruning of gated edges with dead-end cascade and a
//! connectivity fallback.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Edge, GridGeometry, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedEdge {
    pub edge: Edge,
    pub gate: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Edges with gate `>= tau` survive the threshold step.
    pub tau: f64,
    /// Reconnect the output when thresholding cuts it off from the stem.
    #[serde(default = "default_true")]
    pub fallback_connectivity: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            tau: 0.75,
            fallback_connectivity: true,
        }
    }
}

impl PruneConfig {
    pub fn new(tau: f64) -> Result<Self> {
        let cfg = Self {
            tau,
            fallback_connectivity: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn without_fallback(mut self) -> Self {
        self.fallback_connectivity = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("prune.tau", format!("{} is outside (0, 1)", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    /// Surviving edges, forced ones included, in input order.
    pub kept: Vec<GatedEdge>,
    /// Everything else, in input order.
    pub dropped: Vec<GatedEdge>,
    /// Edges re-added to reconnect the output.
    pub forced: Vec<Edge>,
}

impl PruneOutcome {
    pub fn output_reachable(&self, geom: &GridGeometry) -> bool {
        reachable_from_stem(geom, &self.kept.iter().map(|g| g.edge).collect()).contains(&geom.output())
    }
}

impl PruneOutcome {
    pub fn kept_edges(&self) -> Vec<Edge> {
        self.kept.iter().map(|g| g.edge).collect()
    }

    pub fn used_fallback(&self) -> bool {
        !self.forced.is_empty()
    }

    /// The output plus every endpoint of a kept edge, minus the stem.
    pub fn active_nodes(&self, geom: &GridGeometry) -> BTreeSet<NodeId> {
        let mut nodes: BTreeSet<NodeId> = self
            .kept
            .iter()
            .flat_map(|g| [g.edge.src, g.edge.dst])
            .collect();
        nodes.insert(geom.output());
        nodes.remove(&geom.stem());
        nodes
    }
}

/// Repeatedly drops the in-edges of every non-output node that has no
/// outgoing edge left. Afterwards every edge lies on a path to the output.
pub fn cascade(geom: &GridGeometry, edges: &mut BTreeSet<Edge>) {
    loop {
        let with_out: BTreeSet<NodeId> = edges.iter().map(|e| e.src).collect();
        let before = edges.len();
        edges.retain(|e| e.dst == geom.output() || with_out.contains(&e.dst));
        if edges.len() == before {
            return;
        }
    }
}

/// Nodes reachable from the stem through `edges`.
pub fn reachable_from_stem(geom: &GridGeometry, edges: &BTreeSet<Edge>) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([geom.stem()]);
    // Edges always point forward in evaluation order, so one sweep suffices.
    for node in geom.nodes() {
        if seen.contains(&node) {
            continue;
        }
        if edges.iter().any(|e| e.dst == node && seen.contains(&e.src)) {
            seen.insert(node);
        }
    }
    seen
}

/// Cheapest stem-to-output path over `candidates`, where edges already in
/// `kept` are free and any other edge costs `-ln(gate)`. Returns the edges
/// on that path that are not yet kept.
fn reconnect(geom: &GridGeometry, candidates: &[GatedEdge], kept: &BTreeSet<Edge>) -> Option<Vec<Edge>> {
    let nodes = geom.nodes();
    let mut dist: BTreeMap<NodeId, f64> = nodes.iter().map(|&n| (n, f64::INFINITY)).collect();
    let mut via: BTreeMap<NodeId, Edge> = BTreeMap::new();
    for n in reachable_from_stem(geom, kept) {
        dist.insert(n, 0.0);
    }
    // The graph is a DAG in evaluation order, so relaxing in that order is exact.
    for &node in &nodes {
        let d = dist[&node];
        if !d.is_finite() {
            continue;
        }
        for g in candidates.iter().filter(|g| g.edge.src == node) {
            let cost = if kept.contains(&g.edge) { 0.0 } else { -g.gate.max(0.0).ln() };
            let nd = d + cost;
            if nd < dist[&g.edge.dst] {
                dist.insert(g.edge.dst, nd);
                via.insert(g.edge.dst, g.edge);
            }
        }
    }
    if !dist[&geom.output()].is_finite() {
        return None;
    }
    let mut added = Vec::new();
    let mut cur = geom.output();
    while let Some(&e) = via.get(&cur) {
        if !kept.contains(&e) {
            added.push(e);
        }
        cur = e.src;
    }
    added.reverse();
    Some(added)
}

/// Keeps edges with `gate >= tau`. If the output is then unreachable from
/// the stem and fallback is enabled, the most confident connecting path is
/// added back. Dead ends are
/// cascaded away last.
pub fn prune(geom: &GridGeometry, edges: &[GatedEdge], cfg: &PruneConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    for g in edges {
        if !g.gate.is_finite() {
            return Err(Error::NonFinite(format!("gate of edge {}", g.edge)));
        }
        if !geom.is_legal(g.edge) {
            return Err(Error::config("edges", format!("edge {} is not legal", g.edge)));
        }
    }
    let thresholded: BTreeSet<Edge> = edges.iter().filter(|g| g.gate >= cfg.tau).map(|g| g.edge).collect();
    let mut forced = Vec::new();
    let mut kept = thresholded.clone();
    if cfg.fallback_connectivity && !reachable_from_stem(geom, &thresholded).contains(&geom.output()) {
        // Surviving edges are free, so the path reuses as much of them as it can.
        forced = reconnect(geom, edges, &thresholded)
            .ok_or_else(|| Error::Disconnected("no candidate path from stem to output".into()))?;
        kept.extend(forced.iter().copied());
    }
    cascade(geom, &mut kept);

    let (kept_list, dropped) = edges.iter().partition(|g| kept.contains(&g.edge));
    Ok(PruneOutcome {
        kept: kept_list,
        dropped,
        forced,
    })
}
