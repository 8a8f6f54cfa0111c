//! The stage × level aggregation lattice.
//!
//! Stage 0 is the encoder and holds every level; stage `i` holds levels
//! `0..levels - i`, so the last stage is the single full-resolution output
//! node. Level `j` has spatial extent `input / 2^j` and `base_width · 2^j`
//! channels. Legal edges are encoder skips `(0, k) -> (0, j)` with `k < j`
//! and every edge from stage `i - 1` into stage `i`.

mod derive;
mod network;
mod prune;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn;
use crate::tensor::Var;

pub use derive::{derive_architecture, DerivedArchitecture, DerivedEdge, DerivedNode, GRAPH_SCHEMA};
pub use network::{GateKind, Network, NetworkConfig, NetworkPlan};
pub use prune::{cascade, prune, reachable_from_stem, GatedEdge, PruneConfig, PruneOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub stage: usize,
    pub level: usize,
}

impl NodeId {
    pub const fn new(stage: usize, level: usize) -> Self {
        Self { stage, level }
    }

    pub fn is_encoder(self) -> bool {
        self.stage == 0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N{},{}", self.stage, self.level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

impl Edge {
    pub const fn new(src: NodeId, dst: NodeId) -> Self {
        Self { src, dst }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub levels: usize,
    pub base_width: usize,
}

impl GridGeometry {
    pub fn new(levels: usize, base_width: usize) -> Self {
        assert!(levels >= 2, "need at least two levels");
        Self { levels, base_width }
    }

    pub fn stages(&self) -> usize {
        self.levels
    }

    pub fn levels_in_stage(&self, stage: usize) -> usize {
        self.levels - stage
    }

    pub fn stem(&self) -> NodeId {
        NodeId::new(0, 0)
    }

    pub fn output(&self) -> NodeId {
        NodeId::new(self.levels - 1, 0)
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn contains(&self, n: NodeId) -> bool {
        n.stage < self.stages() && n.level < self.levels_in_stage(n.stage)
    }

    /// All nodes in evaluation order: stage by stage, levels ascending.
    pub fn nodes(&self) -> Vec<NodeId> {
        (0..self.stages())
            .flat_map(|s| (0..self.levels_in_stage(s)).map(move |l| NodeId::new(s, l)))
            .collect()
    }

    pub fn is_legal(&self, e: Edge) -> bool {
        if !self.contains(e.src) || !self.contains(e.dst) {
            return false;
        }
        (e.src.stage == 0 && e.dst.stage == 0 && e.src.level < e.dst.level)
            || e.dst.stage == e.src.stage + 1
    }

    /// The dense edge set, ordered by destination then source.
    pub fn legal_edges(&self) -> Vec<Edge> {
        let nodes = self.nodes();
        let mut out = Vec::new();
        for &dst in &nodes {
            for &src in &nodes {
                let e = Edge::new(src, dst);
                if self.is_legal(e) {
                    out.push(e);
                }
            }
        }
        out
    }

    /// Fixed U-Net wiring: the encoder backbone `(0, j-1) -> (0, j)`, plus
    /// for every decoder node the same-level edge and the edge from one
    /// level below in the previous stage.
    pub fn unet_edges(&self) -> Vec<Edge> {
        self.legal_edges()
            .into_iter()
            .filter(|e| {
                if e.dst.stage == 0 {
                    e.src.level + 1 == e.dst.level
                } else {
                    e.src.level == e.dst.level || e.src.level == e.dst.level + 1
                }
            })
            .collect()
    }
}

/// Mean over gates of `-(σ(β) - 0.5)²`; lies in `[-0.25, 0]` and is largest
/// at `β = 0`. Minimizing it pushes every gate towards 0 or 1.
pub fn sparsity_penalty(beta: &Var) -> Result<Var> {
    nn::sigmoid(beta)?.add_scalar(-0.5)?.square()?.mean()?.neg()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn lattice_shape() {
        let g = GridGeometry::new(4, 4);
        assert_eq!(g.nodes().len(), 10);
        assert_eq!(g.levels_in_stage(0), 4);
        assert_eq!(g.levels_in_stage(3), 1);
        assert_eq!(g.output(), NodeId::new(3, 0));
        assert_eq!(g.width(2), 16);
        // 6 encoder skips + 4*3 + 3*2 + 2*1
        assert_eq!(g.legal_edges().len(), 26);
        let five = GridGeometry::new(5, 4);
        assert!(!five.contains(NodeId::new(1, 4)));
        assert!(!five.contains(NodeId::new(2, 3)));
    }

    #[test]
    fn legality() {
        let g = GridGeometry::new(3, 2);
        let n = NodeId::new;
        assert!(g.is_legal(Edge::new(n(0, 0), n(0, 2))));
        assert!(!g.is_legal(Edge::new(n(0, 2), n(0, 1))));
        assert!(g.is_legal(Edge::new(n(0, 2), n(1, 0))));
        assert!(!g.is_legal(Edge::new(n(0, 0), n(2, 0))));
        assert!(!g.is_legal(Edge::new(n(1, 0), n(1, 1))));
    }

    #[test]
    fn unet_template() {
        let g = GridGeometry::new(3, 2);
        let n = NodeId::new;
        let expect = vec![
            Edge::new(n(0, 0), n(0, 1)),
            Edge::new(n(0, 1), n(0, 2)),
            Edge::new(n(0, 0), n(1, 0)),
            Edge::new(n(0, 1), n(1, 0)),
            Edge::new(n(0, 1), n(1, 1)),
            Edge::new(n(0, 2), n(1, 1)),
            Edge::new(n(1, 0), n(2, 0)),
            Edge::new(n(1, 1), n(2, 0)),
        ];
        assert_eq!(g.unet_edges(), expect);
    }

    #[test]
    fn penalty_values() {
        let tape = Tape::new();
        let zero = tape.leaf(Tensor::zeros(&[3]));
        let j = sparsity_penalty(&zero).unwrap();
        assert_eq!(j.value().item(), 0.0);
        let g = j.backward().unwrap();
        assert!(g.get(&zero).unwrap().data().iter().all(|&v| v == 0.0));
        let far = tape.constant(Tensor::from_vec(vec![-50.0, 60.0]));
        let j = sparsity_penalty(&far).unwrap().value().item();
        assert!((j + 0.25).abs() < 1e-12);
    }
}
