//! Searchable building blocks: per-layer mixtures over fixed candidate sets.
//!
//! Kernel extents below are written `[depth, height, width]`. The usual
//! `a×b×c` naming puts depth last, so a `3×3×1` conv has unit depth. In
//! rank-2 mode the depth extent is dropped, except for the pseudo-3d pair
//! which becomes `1×3 ∘ 3×1`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvSpec, PoolKind};
use crate::params::{Bindings, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Normal,
    Reduction,
    Expansion,
}

/// One candidate operator. Order within a set is part of the checkpoint
/// format: alpha index `i` always refers to `set.candidates[i]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Candidate {
    Conv3,
    Conv3x3x1,
    Conv5,
    Pseudo3d,
    DoubleConv3,
    DilatedConv3,
    DilatedConv5,
    MaxPool,
    AvgPool,
    StridedConv3,
    TransposeConv,
    Interpolate,
}

const ALL: [Candidate; 12] = [
    Candidate::Conv3,
    Candidate::Conv3x3x1,
    Candidate::Conv5,
    Candidate::Pseudo3d,
    Candidate::DoubleConv3,
    Candidate::DilatedConv3,
    Candidate::DilatedConv5,
    Candidate::MaxPool,
    Candidate::AvgPool,
    Candidate::StridedConv3,
    Candidate::TransposeConv,
    Candidate::Interpolate,
];

fn kernel(rank: usize, dhw: [usize; 3]) -> Vec<usize> {
    if rank == 3 {
        dhw.to_vec()
    } else {
        vec![dhw[1], dhw[2]]
    }
}

impl Candidate {
    pub fn name(self) -> &'static str {
        match self {
            Candidate::Conv3 => "conv3x3x3",
            Candidate::Conv3x3x1 => "conv3x3x1",
            Candidate::Conv5 => "conv5x5x5",
            Candidate::Pseudo3d => "pseudo3d",
            Candidate::DoubleConv3 => "double_conv3x3x3",
            Candidate::DilatedConv3 => "dil2_conv3x3x3",
            Candidate::DilatedConv5 => "dil2_conv5x5x5",
            Candidate::MaxPool => "max_pool",
            Candidate::AvgPool => "avg_pool",
            Candidate::StridedConv3 => "conv3x3x3_s2",
            Candidate::TransposeConv => "transpose_conv",
            Candidate::Interpolate => "trilinear",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn kind(self) -> LayerKind {
        match self {
            Candidate::MaxPool | Candidate::AvgPool | Candidate::StridedConv3 => {
                LayerKind::Reduction
            }
            Candidate::TransposeConv | Candidate::Interpolate => LayerKind::Expansion,
            _ => LayerKind::Normal,
        }
    }

    /// Convolutions applied in sequence, all mapping `channels -> channels`.
    pub fn conv_specs(self, rank: usize, channels: usize) -> Vec<ConvSpec> {
        let c = channels;
        let same = |dhw: [usize; 3], dil: usize| {
            let k = kernel(rank, dhw);
            let d = vec![dil; k.len()];
            ConvSpec::same(c, c, &k, &d)
        };
        match self {
            Candidate::Conv3 => vec![same([3, 3, 3], 1)],
            Candidate::Conv3x3x1 => vec![same([1, 3, 3], 1)],
            Candidate::Conv5 => vec![same([5, 5, 5], 1)],
            Candidate::Pseudo3d => {
                if rank == 3 {
                    vec![same([1, 3, 3], 1), same([3, 1, 1], 1)]
                } else {
                    vec![
                        ConvSpec::same(c, c, &[1, 3], &[1, 1]),
                        ConvSpec::same(c, c, &[3, 1], &[1, 1]),
                    ]
                }
            }
            Candidate::DoubleConv3 => vec![same([3, 3, 3], 1), same([3, 3, 3], 1)],
            Candidate::DilatedConv3 => vec![same([3, 3, 3], 2)],
            Candidate::DilatedConv5 => vec![same([5, 5, 5], 2)],
            Candidate::StridedConv3 => vec![ConvSpec::strided(rank, c, c, 3, 2, 1)],
            Candidate::TransposeConv => vec![ConvSpec::strided(rank, c, c, 2, 2, 0)],
            Candidate::MaxPool | Candidate::AvgPool | Candidate::Interpolate => Vec::new(),
        }
    }

    /// Every candidate is followed by instance norm and ReLU except the
    /// parameter-free resamplers.
    fn forward(self, x: &Var, specs: &[ConvSpec], weights: &[&Var]) -> Result<Var> {
        let rank = x.shape().len() - 2;
        let norm_relu = |v: Var| nn::norm_act(&v);
        match self {
            Candidate::MaxPool | Candidate::AvgPool => {
                let kind = if self == Candidate::MaxPool {
                    PoolKind::Max
                } else {
                    PoolKind::Avg
                };
                nn::pool(x, kind, &vec![2; rank], &vec![2; rank])
            }
            Candidate::Interpolate => nn::interpolate(x, &vec![2.0; rank]),
            Candidate::TransposeConv => norm_relu(nn::transpose_conv(x, weights[0], &specs[0])?),
            Candidate::DoubleConv3 => {
                let h = norm_relu(nn::conv(x, weights[0], None, &specs[0])?)?;
                norm_relu(nn::conv(&h, weights[1], None, &specs[1])?)
            }
            _ => {
                let mut h = x.clone();
                for (spec, w) in specs.iter().zip(weights) {
                    h = nn::conv(&h, w, None, spec)?;
                }
                norm_relu(h)
            }
        }
    }
}

impl fmt::Display for Candidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Candidate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Candidate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        Candidate::from_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown candidate `{name}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub name: String,
    pub kind: LayerKind,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn normal() -> Self {
        Self {
            name: "normal".into(),
            kind: LayerKind::Normal,
            candidates: ALL[..7].to_vec(),
        }
    }

    pub fn reduction() -> Self {
        Self {
            name: "reduction".into(),
            kind: LayerKind::Reduction,
            candidates: vec![Candidate::MaxPool, Candidate::AvgPool, Candidate::StridedConv3],
        }
    }

    pub fn expansion() -> Self {
        Self {
            name: "expansion".into(),
            kind: LayerKind::Expansion,
            candidates: vec![Candidate::TransposeConv, Candidate::Interpolate],
        }
    }

    /// The full searchable set for a layer kind.
    pub fn searchable(kind: LayerKind) -> Self {
        match kind {
            LayerKind::Normal => Self::normal(),
            LayerKind::Reduction => Self::reduction(),
            LayerKind::Expansion => Self::expansion(),
        }
    }

    /// The single operator used when block search is disabled: a 3×3(×3)
    /// conv, max pooling, or interpolation.
    pub fn fixed(kind: LayerKind) -> Self {
        let c = match kind {
            LayerKind::Normal => Candidate::Conv3,
            LayerKind::Reduction => Candidate::MaxPool,
            LayerKind::Expansion => Candidate::Interpolate,
        };
        Self::singleton(c)
    }

    pub fn singleton(c: Candidate) -> Self {
        Self {
            name: c.name().into(),
            kind: c.kind(),
            candidates: vec![c],
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Argmax of the logits, lowest index on ties.
pub fn select_index(alpha: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate() {
        if a > alpha[best] {
            best = i;
        }
    }
    best
}

/// Entropy of `softmax(alpha)` in nats.
pub fn alpha_entropy(alpha: &[f64]) -> f64 {
    nn::softmax_values(alpha)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

#[derive(Clone, Debug)]
struct CandidateUnit {
    candidate: Candidate,
    specs: Vec<ConvSpec>,
    weights: Vec<ParamId>,
}

/// `y = Σ softmax(α)_i O_i(x)` with private weights per candidate.
///
/// Singleton sets carry no logits and evaluate their operator directly.
#[derive(Clone, Debug)]
pub struct MixedOp {
    set: CandidateSet,
    alpha: Option<ParamId>,
    units: Vec<CandidateUnit>,
}

impl MixedOp {
    /// Registers `{prefix}.alpha` (zero logits) and `{prefix}.{candidate}.w{i}`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        set: CandidateSet,
        rank: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let alpha = (set.len() > 1)
            .then(|| store.add(format!("{prefix}.alpha"), ParamGroup::Alpha, Tensor::zeros(&[set.len()])));
        let units = set
            .candidates
            .iter()
            .map(|&candidate| {
                let specs = candidate.conv_specs(rank, channels);
                let weights = specs
                    .iter()
                    .enumerate()
                    .map(|(i, spec)| {
                        store.add_conv_weight(format!("{prefix}.{}.w{i}", candidate.name()), spec, rng)
                    })
                    .collect();
                CandidateUnit {
                    candidate,
                    specs,
                    weights,
                }
            })
            .collect();
        Self { set, alpha, units }
    }

    pub fn set(&self) -> &CandidateSet {
        &self.set
    }

    pub fn alpha(&self) -> Option<ParamId> {
        self.alpha
    }

    pub fn alpha_values<'a>(&self, store: &'a ParamStore) -> Option<&'a [f64]> {
        self.alpha.map(|id| store.value(id).data())
    }

    /// Index of the candidate with the largest logit.
    pub fn select(&self, store: &ParamStore) -> usize {
        self.alpha_values(store).map(select_index).unwrap_or(0)
    }

    pub fn selected(&self, store: &ParamStore) -> Candidate {
        self.set.candidates[self.select(store)]
    }

    /// Output of candidate `i` alone.
    pub fn candidate_forward(&self, b: &Bindings, i: usize, x: &Var) -> Result<Var> {
        let unit = &self.units[i];
        let w: Vec<&Var> = unit.weights.iter().map(|&id| b.var(id)).collect();
        unit.candidate.forward(x, &unit.specs, &w)
    }

    pub fn forward(&self, b: &Bindings, x: &Var) -> Result<Var> {
        let Some(alpha) = self.alpha else {
            return self.candidate_forward(b, 0, x);
        };
        let weights = nn::softmax(b.var(alpha))?;
        let mut terms = Vec::with_capacity(self.units.len());
        for i in 0..self.units.len() {
            let out = self.candidate_forward(b, i, x)?;
            if let Some(first) = terms.first() {
                let first: &Var = first;
                if first.shape() != out.shape() {
                    return Err(Error::shape(
                        "mixed_forward",
                        format!(
                            "candidate {} gives {:?}, {} gives {:?}",
                            self.units[0].candidate,
                            first.shape(),
                            self.units[i].candidate,
                            out.shape()
                        ),
                    ));
                }
            }
            terms.push(out.scale_by(&weights.index(i)?)?);
        }
        Var::add_n(&terms)
    }
}

/// Plain 1×1 convolution with bias, used for channel projection.
#[derive(Clone, Debug)]
pub struct Projection {
    spec: ConvSpec,
    weight: ParamId,
    bias: ParamId,
}

impl Projection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        rank: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let spec = ConvSpec::cube(rank, in_channels, out_channels, 1);
        let weight = store.add_conv_weight(format!("{prefix}.w"), &spec, rng);
        let bias = store.add(format!("{prefix}.b"), ParamGroup::Weight, Tensor::zeros(&[out_channels]));
        Self { spec, weight, bias }
    }

    pub fn forward(&self, b: &Bindings, x: &Var) -> Result<Var> {
        nn::conv(x, b.var(self.weight), Some(b.var(self.bias)), &self.spec)
    }
}

/// Two mixed layers plus an optional trailing channel projection.
///
/// Encoder blocks are normal + reduction (halving extents), decoder blocks
/// normal + normal or normal + expansion (doubling).
#[derive(Clone, Debug)]
pub struct Sbb {
    layers: [MixedOp; 2],
    projection: Option<Projection>,
}

impl Sbb {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        sets: [CandidateSet; 2],
        rank: usize,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let [first, second] = sets;
        let layers = [
            MixedOp::new(store, &format!("{prefix}.l0"), first, rank, in_channels, rng),
            MixedOp::new(store, &format!("{prefix}.l1"), second, rank, in_channels, rng),
        ];
        let projection = (in_channels != out_channels).then(|| {
            Projection::new(store, &format!("{prefix}.proj"), rank, in_channels, out_channels, rng)
        });
        Self { layers, projection }
    }

    pub fn layers(&self) -> &[MixedOp; 2] {
        &self.layers
    }

    pub fn forward(&self, b: &Bindings, x: &Var) -> Result<Var> {
        let h = self.layers[0].forward(b, x)?;
        let h = self.layers[1].forward(b, &h)?;
        match &self.projection {
            Some(p) => p.forward(b, &h),
            None => Ok(h),
        }
    }
}
