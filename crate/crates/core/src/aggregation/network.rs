//! Networks over the lattice: the supernet and derived discrete networks
//! share this one implementation and differ only in their [`NetworkPlan`].

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sparsity_penalty, Edge, GatedEdge, GridGeometry, NodeId};
use crate::error::{Error, Result};
use crate::nn::{self, sigmoid_scalar, ConvSpec};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::search_space::{CandidateSet, LayerKind, MixedOp, Projection, Sbb};
use crate::tensor::{LabelTensor, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of spatial dims, 2 or 3.
    pub rank: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub geometry: GridGeometry,
    /// Searchable blocks; when off every layer is a fixed operator.
    pub search_blocks: bool,
    /// Searchable gated aggregation; when off the fixed U-Net wiring is used
    /// with gates hard-wired to 1.
    pub search_aggregation: bool,
    /// Decoder blocks resample through an expansion layer (normal +
    /// expansion) instead of aligning directly to their own level.
    pub decoder_expansion: bool,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank != 2 && self.rank != 3 {
            return Err(Error::config("network.rank", "must be 2 or 3"));
        }
        if self.geometry.levels < 2 {
            return Err(Error::config("network.geometry.levels", "must be at least 2"));
        }
        if self.geometry.base_width == 0 {
            return Err(Error::config("network.geometry.base_width", "must be positive"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("network.in_channels", "must be positive"));
        }
        if !(2..=u8::MAX as usize).contains(&self.num_classes) {
            return Err(Error::config("network.num_classes", "must be in 2..=255"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// `σ(β)` with a learnable logit.
    Searchable,
    /// Hard-wired to 1.
    Fixed,
}

/// Which nodes exist (with their two layer candidate sets) and which edges
/// connect them. The stem is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPlan {
    pub nodes: BTreeMap<NodeId, [CandidateSet; 2]>,
    pub edges: Vec<(Edge, GateKind)>,
}

fn second_layer_kind(cfg: &NetworkConfig, node: NodeId) -> LayerKind {
    if node.is_encoder() {
        LayerKind::Reduction
    } else if cfg.decoder_expansion {
        LayerKind::Expansion
    } else {
        LayerKind::Normal
    }
}

impl NetworkPlan {
    /// Every lattice node with full (or fixed) candidate sets, and the dense
    /// searchable edge set (or the fixed U-Net wiring).
    pub fn supernet(cfg: &NetworkConfig) -> Self {
        let geom = cfg.geometry;
        let set = |kind| {
            if cfg.search_blocks {
                CandidateSet::searchable(kind)
            } else {
                CandidateSet::fixed(kind)
            }
        };
        let nodes = geom
            .nodes()
            .into_iter()
            .filter(|&n| n != geom.stem())
            .map(|n| (n, [set(LayerKind::Normal), set(second_layer_kind(cfg, n))]))
            .collect();
        let edges = if cfg.search_aggregation {
            geom.legal_edges()
                .into_iter()
                .map(|e| (e, GateKind::Searchable))
                .collect()
        } else {
            geom.unet_edges().into_iter().map(|e| (e, GateKind::Fixed)).collect()
        };
        Self { nodes, edges }
    }

    fn validate(&self, cfg: &NetworkConfig) -> Result<()> {
        let geom = cfg.geometry;
        let bad = |reason: String| Err(Error::config("architecture", reason));
        if !self.nodes.contains_key(&geom.output()) {
            return bad(format!("output node {} missing", geom.output()));
        }
        for (&n, sets) in &self.nodes {
            if !geom.contains(n) || n == geom.stem() {
                return bad(format!("node {n} is not a block node of the lattice"));
            }
            if sets[0].kind != LayerKind::Normal || sets[1].kind != second_layer_kind(cfg, n) {
                return bad(format!("node {n} has layer kinds {:?}/{:?}", sets[0].kind, sets[1].kind));
            }
        }
        for (e, _) in &self.edges {
            if !geom.is_legal(*e) {
                return bad(format!("edge {e} is not legal"));
            }
            for end in [e.src, e.dst] {
                if end != geom.stem() && !self.nodes.contains_key(&end) {
                    return bad(format!("edge {e} touches absent node {end}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EdgeUnit {
    edge: Edge,
    gate: Option<usize>,
    projection: Option<Projection>,
}

/// A network on the lattice.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    plan: NetworkPlan,
    store: ParamStore,
    stem: (ConvSpec, ParamId),
    blocks: BTreeMap<NodeId, Sbb>,
    edges: Vec<EdgeUnit>,
    beta: Option<ParamId>,
    head: Projection,
}

impl Network {
    /// The over-parameterized search network for `cfg`.
    pub fn supernet(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, NetworkPlan::supernet(cfg), seed)
    }

    /// Fresh weights (uniform `±1/sqrt(fan_in)`), zero architecture logits.
    pub fn build(cfg: &NetworkConfig, plan: NetworkPlan, seed: u64) -> Result<Self> {
        cfg.validate()?;
        plan.validate(cfg)?;
        let geom = cfg.geometry;
        let rank = cfg.rank;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let stem_spec = ConvSpec::cube(rank, cfg.in_channels, geom.width(0), 3);
        let stem_w = store.add_conv_weight("stem.w", &stem_spec, &mut rng);

        let mut blocks = BTreeMap::new();
        for (&node, sets) in &plan.nodes {
            let input = Self::input_level_for(cfg, node);
            let sbb = Sbb::new(
                &mut store,
                &format!("n{}_{}", node.stage, node.level),
                sets.clone(),
                rank,
                geom.width(input),
                geom.width(node.level),
                &mut rng,
            );
            blocks.insert(node, sbb);
        }

        let mut edges = Vec::with_capacity(plan.edges.len());
        let mut searchable = 0;
        for &(edge, kind) in &plan.edges {
            let target = Self::input_level_for(cfg, edge.dst);
            let (cin, cout) = (geom.width(edge.src.level), geom.width(target));
            let projection = (cin != cout).then(|| {
                let prefix = format!(
                    "e{}_{}-{}_{}.proj",
                    edge.src.stage, edge.src.level, edge.dst.stage, edge.dst.level
                );
                Projection::new(&mut store, &prefix, rank, cin, cout, &mut rng)
            });
            let gate = (kind == GateKind::Searchable).then(|| {
                searchable += 1;
                searchable - 1
            });
            edges.push(EdgeUnit {
                edge,
                gate,
                projection,
            });
        }
        let beta = (searchable > 0)
            .then(|| store.add("beta", ParamGroup::Beta, Tensor::zeros(&[searchable])));
        let head = Projection::new(&mut store, "head", rank, geom.width(0), cfg.num_classes, &mut rng);

        Ok(Self {
            config: cfg.clone(),
            plan,
            store,
            stem: (stem_spec, stem_w),
            blocks,
            edges,
            beta,
            head,
        })
    }

    fn input_level_for(cfg: &NetworkConfig, node: NodeId) -> usize {
        if node.is_encoder() {
            node.level.saturating_sub(1)
        } else if cfg.decoder_expansion {
            node.level + 1
        } else {
            node.level
        }
    }

    /// Level whose resolution and width the incoming features are aligned to.
    pub fn input_level(&self, node: NodeId) -> usize {
        Self::input_level_for(&self.config, node)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn geometry(&self) -> GridGeometry {
        self.config.geometry
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &BTreeMap<NodeId, Sbb> {
        &self.blocks
    }

    pub fn beta(&self) -> Option<ParamId> {
        self.beta
    }

    /// All mixed layers as `(node, layer index, op)`.
    pub fn mixed_ops(&self) -> impl Iterator<Item = (NodeId, usize, &MixedOp)> {
        self.blocks
            .iter()
            .flat_map(|(&n, sbb)| sbb.layers().iter().enumerate().map(move |(i, m)| (n, i, m)))
    }

    /// Current gate value of every edge; fixed gates report 1.
    pub fn gates(&self) -> Vec<GatedEdge> {
        let beta = self.beta.map(|id| self.store.value(id).data());
        self.edges
            .iter()
            .map(|u| GatedEdge {
                edge: u.edge,
                gate: match (u.gate, beta) {
                    (Some(i), Some(b)) => sigmoid_scalar(b[i]),
                    _ => 1.0,
                },
            })
            .collect()
    }

    /// Index of `edge` in the beta vector, if it is searchable.
    pub fn beta_index(&self, edge: Edge) -> Option<usize> {
        self.edges.iter().find(|u| u.edge == edge).and_then(|u| u.gate)
    }

    /// Mean `|σ(β) - 0.5|` over searchable edges.
    pub fn gate_separation(&self) -> Option<f64> {
        let b = self.store.value(self.beta?).data();
        Some(b.iter().map(|&v| (sigmoid_scalar(v) - 0.5).abs()).sum::<f64>() / b.len() as f64)
    }

    pub fn mean_gate(&self) -> Option<f64> {
        let b = self.store.value(self.beta?).data();
        Some(b.iter().map(|&v| sigmoid_scalar(v)).sum::<f64>() / b.len() as f64)
    }

    /// Mean entropy of the relaxed operator weights over searchable layers.
    pub fn alpha_entropy(&self) -> Option<f64> {
        let ents: Vec<f64> = self
            .mixed_ops()
            .filter_map(|(_, _, m)| m.alpha_values(&self.store))
            .map(crate::search_space::alpha_entropy)
            .collect();
        (!ents.is_empty()).then(|| ents.iter().sum::<f64>() / ents.len() as f64)
    }

    fn check_input(&self, x: &Var) -> Result<()> {
        let s = x.shape();
        let cfg = &self.config;
        let factor = 1usize << (cfg.geometry.levels - 1);
        let ok = s.len() == cfg.rank + 2
            && s[1] == cfg.in_channels
            && s[2..].iter().all(|&e| e % factor == 0);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "network",
                format!(
                    "input {s:?}: expected [N, {}, ...] with rank-{} extents divisible by {factor}",
                    cfg.in_channels, cfg.rank
                ),
            ))
        }
    }

    /// Resamples `x` from `src_level` to `dst_level` and projects it to the
    /// destination width. Projection runs at the coarser resolution.
    fn align(&self, b: &Bindings, unit: &EdgeUnit, x: &Var, dst_level: usize) -> Result<Var> {
        let shift = unit.edge.src.level as i32 - dst_level as i32;
        let project = |v: &Var| match &unit.projection {
            Some(p) => p.forward(b, v),
            None => Ok(v.clone()),
        };
        if shift > 0 {
            nn::rescale_levels(&project(x)?, shift)
        } else {
            project(&nn::rescale_levels(x, shift)?)
        }
    }

    /// Evaluates every node in topological order. Returns the logits and the
    /// node feature maps.
    pub fn forward_nodes(&self, b: &Bindings, x: &Var) -> Result<(Var, BTreeMap<NodeId, Var>)> {
        self.check_input(x)?;
        let geom = self.config.geometry;
        let mut values: BTreeMap<NodeId, Var> = BTreeMap::new();
        let stem = nn::conv(x, b.var(self.stem.1), None, &self.stem.0)?;
        values.insert(geom.stem(), nn::norm_act(&stem)?);

        let gates = match self.beta {
            Some(id) => Some(nn::sigmoid(b.var(id))?),
            None => None,
        };
        let batch = x.shape()[0];
        for node in geom.nodes() {
            let Some(block) = self.blocks.get(&node) else {
                continue;
            };
            let target = self.input_level(node);
            let mut terms = Vec::new();
            for unit in self.edges.iter().filter(|u| u.edge.dst == node) {
                let src = values
                    .get(&unit.edge.src)
                    .ok_or_else(|| Error::UnresolvedDependency(format!("{node} needs {}", unit.edge.src)))?;
                let aligned = self.align(b, unit, src, target)?;
                terms.push(match (unit.gate, &gates) {
                    (Some(i), Some(g)) => aligned.scale_by(&g.index(i)?)?,
                    _ => aligned,
                });
            }
            let agg = if terms.is_empty() {
                let mut shape = vec![batch, geom.width(target)];
                shape.extend(x.shape()[2..].iter().map(|e| e >> target));
                x.constant_like(Tensor::zeros(&shape))
            } else {
                Var::add_n(&terms)?
            };
            values.insert(node, block.forward(b, &agg)?);
        }
        let out = values
            .get(&geom.output())
            .ok_or_else(|| Error::UnresolvedDependency(geom.output().to_string()))?;
        let logits = self.head.forward(b, out)?;
        Ok((logits, values))
    }

    pub fn forward(&self, b: &Bindings, x: &Var) -> Result<Var> {
        Ok(self.forward_nodes(b, x)?.0)
    }

    /// Cross-entropy of the logits against `labels`.
    pub fn task_loss(&self, b: &Bindings, x: &Var, labels: &LabelTensor) -> Result<Var> {
        nn::cross_entropy(&self.forward(b, x)?, labels)
    }

    /// `CE + λ J(β)`; the penalty term is skipped without searchable gates.
    pub fn arch_loss(&self, b: &Bindings, x: &Var, labels: &LabelTensor, lambda: f64) -> Result<Var> {
        let ce = self.task_loss(b, x, labels)?;
        match self.beta {
            Some(id) if lambda != 0.0 => ce.add(&sparsity_penalty(b.var(id))?.scale(lambda)?),
            _ => Ok(ce),
        }
    }
}
