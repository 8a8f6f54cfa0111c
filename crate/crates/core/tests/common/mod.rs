//! Oracles shared by the integration tests and the acceptance runner.
//!
//! Each check is written against the public surface only and recomputes its
//! expectation by a different route than the code under test.

#![allow(dead_code)]

use std::collections::BTreeSet;

use aggnas::aggregation::{
    derive_architecture, prune, sparsity_penalty, Edge, GatedEdge, GridGeometry, Network, NetworkConfig, NodeId,
    PruneConfig,
};
use aggnas::gradcheck::{check_gradients, relative_error, GradCheckConfig, GradCheckReport};
use aggnas::nn::{self, ConvSpec, PoolKind};
use aggnas::params::ParamGroup;
use aggnas::tasks::{dice, SyntheticTaskSpec};
use aggnas::trainer::{BiLevelConfig, Searcher};
use aggnas::{LabelTensor, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// Uniform values pushed at least `gap` away from zero, so that kinks at
/// the origin stay outside the finite-difference stencil.
pub fn off_kink(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    uniform(shape, seed).map(|v| if v.abs() < gap { v + gap.copysign(v) * 2.0 } else { v })
}

/// A permutation of evenly spaced values: no two pooling candidates tie.
pub fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng(seed));
    Tensor::new(shape.to_vec(), order.into_iter().map(|i| i as f64 * 0.01 - 0.3).collect()).unwrap()
}

pub fn labels(shape: &[usize], classes: u8, seed: u64) -> LabelTensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    LabelTensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0..classes)).collect()).unwrap()
}

/// `<y, probe>` with a fixed random probe: a scalar whose gradient reaches
/// every output element with a distinct weight.
pub fn probe_sum(y: &Var, seed: u64) -> Result<Var> {
    let p = y.constant_like(uniform(y.shape(), seed));
    y.mul(&p)?.sum()
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let conv_case = |name: &'static str, x: Vec<usize>, spec: ConvSpec, bias: bool, seed: u64| -> OpCase {
        let mut inputs = vec![uniform(&x, seed), uniform(&spec.weight_shape(), seed + 1)];
        if bias {
            inputs.push(uniform(&[spec.out_channels], seed + 2));
        }
        let f = move |v: &[Var]| probe_sum(&nn::conv(&v[0], &v[1], v.get(2), &spec)?, 99);
        (name, inputs, Box::new(f))
    };
    let tconv = ConvSpec::strided(2, 3, 2, 2, 2, 0);
    let tconv3 = ConvSpec::strided(3, 2, 2, 2, 2, 0);
    vec![
        ("add", vec![uniform(&[2, 3], 1), uniform(&[2, 3], 2)], Box::new(|v: &[Var]| probe_sum(&v[0].add(&v[1])?, 3))),
        ("sub", vec![uniform(&[2, 3], 1), uniform(&[2, 3], 2)], Box::new(|v: &[Var]| probe_sum(&v[0].sub(&v[1])?, 3))),
        ("mul", vec![uniform(&[2, 3], 4), uniform(&[2, 3], 5)], Box::new(|v: &[Var]| probe_sum(&v[0].mul(&v[1])?, 6))),
        ("neg_scale_shift", vec![uniform(&[5], 7)], Box::new(|v: &[Var]| probe_sum(&v[0].neg()?.scale(1.7)?.add_scalar(0.3)?, 8))),
        ("square_mean", vec![uniform(&[4, 2], 9)], Box::new(|v: &[Var]| v[0].square()?.mean())),
        ("add_n", vec![uniform(&[3], 10), uniform(&[3], 11), uniform(&[3], 12)], Box::new(|v: &[Var]| probe_sum(&Var::add_n(v)?, 13))),
        ("index_scale_by", vec![uniform(&[1, 2, 3, 3], 14), uniform(&[4], 15)], Box::new(|v: &[Var]| probe_sum(&v[0].scale_by(&v[1].index(2)?)?, 16))),
        ("reshape", vec![uniform(&[2, 6], 17)], Box::new(|v: &[Var]| probe_sum(&v[0].reshape(&[3, 4])?, 18))),
        conv_case("conv2d_3x3_bias", vec![2, 2, 5, 6], ConvSpec::cube(2, 2, 3, 3), true, 20),
        conv_case("conv2d_1x3", vec![1, 2, 4, 5], ConvSpec::same(2, 2, &[1, 3], &[1, 1]), false, 23),
        conv_case("conv2d_5x5_dil2", vec![1, 2, 9, 9], ConvSpec::same(2, 2, &[5, 5], &[2, 2]), false, 26),
        conv_case("conv2d_3x3_stride2", vec![1, 2, 6, 6], ConvSpec::strided(2, 2, 3, 3, 2, 1), true, 29),
        conv_case("conv3d_3x3x3", vec![1, 2, 4, 4, 4], ConvSpec::cube(3, 2, 2, 3), true, 32),
        conv_case("conv3d_3x3x1", vec![1, 1, 3, 4, 4], ConvSpec::same(1, 2, &[1, 3, 3], &[1, 1, 1]), false, 35),
        (
            "transpose_conv2d",
            vec![uniform(&[2, 3, 3, 2], 40), uniform(&[3, 2, 2, 2], 41)],
            Box::new(move |v: &[Var]| probe_sum(&nn::transpose_conv(&v[0], &v[1], &tconv)?, 42)),
        ),
        (
            "transpose_conv3d",
            vec![uniform(&[1, 2, 2, 2, 2], 43), uniform(&[2, 2, 2, 2, 2], 44)],
            Box::new(move |v: &[Var]| probe_sum(&nn::transpose_conv(&v[0], &v[1], &tconv3)?, 45)),
        ),
        ("instance_norm", vec![uniform(&[2, 2, 3, 4], 50)], Box::new(|v: &[Var]| probe_sum(&nn::instance_norm(&v[0])?, 51))),
        ("relu", vec![off_kink(&[3, 4], 52, 0.05)], Box::new(|v: &[Var]| probe_sum(&nn::relu(&v[0])?, 53))),
        (
            "leaky_relu",
            vec![off_kink(&[3, 4], 54, 0.05)],
            Box::new(|v: &[Var]| probe_sum(&nn::leaky_relu(&v[0], nn::ACTIVATION_SLOPE)?, 55)),
        ),
        ("norm_act", vec![uniform(&[1, 2, 4, 4], 56)], Box::new(|v: &[Var]| probe_sum(&nn::norm_act(&v[0])?, 57))),
        ("sigmoid", vec![uniform(&[6], 58).map(|v| 3.0 * v)], Box::new(|v: &[Var]| probe_sum(&nn::sigmoid(&v[0])?, 59))),
        ("softmax", vec![uniform(&[5], 60)], Box::new(|v: &[Var]| probe_sum(&nn::softmax(&v[0])?, 61))),
        (
            "max_pool2d",
            vec![distinct(&[1, 2, 4, 6], 62)],
            Box::new(|v: &[Var]| probe_sum(&nn::pool(&v[0], PoolKind::Max, &[2, 2], &[2, 2])?, 63)),
        ),
        (
            "avg_pool3d",
            vec![uniform(&[1, 2, 4, 4, 2], 64)],
            Box::new(|v: &[Var]| probe_sum(&nn::pool(&v[0], PoolKind::Avg, &[2, 2, 2], &[2, 2, 2])?, 65)),
        ),
        (
            "max_pool3d",
            vec![distinct(&[1, 1, 2, 4, 4], 66)],
            Box::new(|v: &[Var]| probe_sum(&nn::pool(&v[0], PoolKind::Max, &[2, 2, 2], &[2, 2, 2])?, 67)),
        ),
        ("upsample2d", vec![uniform(&[1, 2, 3, 2], 68)], Box::new(|v: &[Var]| probe_sum(&nn::interpolate(&v[0], &[2.0, 2.0])?, 69))),
        ("downsample3d", vec![uniform(&[1, 1, 4, 2, 4], 70)], Box::new(|v: &[Var]| probe_sum(&nn::interpolate(&v[0], &[0.5, 1.0, 0.5])?, 71))),
        ("rescale_up2", vec![uniform(&[1, 1, 2, 2], 72)], Box::new(|v: &[Var]| probe_sum(&nn::rescale_levels(&v[0], 2)?, 73))),
        ("rescale_down2", vec![uniform(&[1, 1, 8, 4], 74)], Box::new(|v: &[Var]| probe_sum(&nn::rescale_levels(&v[0], -2)?, 75))),
        (
            "cross_entropy",
            vec![uniform(&[2, 3, 3, 4], 76).map(|v| 2.0 * v)],
            Box::new(|v: &[Var]| nn::cross_entropy(&v[0], &labels(&[2, 3, 4], 3, 77))),
        ),
        ("sparsity_penalty", vec![uniform(&[7], 78).map(|v| 3.0 * v)], Box::new(|v: &[Var]| sparsity_penalty(&v[0]))),
    ]
}

/// Central-difference check of every differentiable op.
pub fn op_gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = check_gradients(&inputs, |v| f(v), GradCheckConfig::default())
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, report)
        })
        .collect()
}

pub fn toy_config(levels: usize, base_width: usize, rank: usize) -> NetworkConfig {
    NetworkConfig {
        rank,
        in_channels: 1,
        num_classes: 3,
        geometry: GridGeometry::new(levels, base_width),
        search_blocks: true,
        search_aggregation: true,
        decoder_expansion: false,
    }
}

/// Supernet with non-trivial architecture logits.
pub fn randomized_supernet(cfg: &NetworkConfig, seed: u64) -> Network {
    let mut net = Network::supernet(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    let arch: Vec<_> = net.store().ids(|g| g.is_arch());
    for id in arch {
        for v in net.store_mut().value_mut(id).data_mut() {
            *v = r.gen_range(-1.5..1.5);
        }
    }
    net
}

#[derive(Clone, Debug)]
pub struct EndToEndReport {
    pub checked: usize,
    /// Stencils skipped because the perturbation flipped an activation sign
    /// or a max-pool winner somewhere in the graph.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

/// `CE + λJ` of the supernet differentiated by the tape, against central
/// differences of the plain forward pass. Every architecture logit is
/// checked, plus `weight_samples` random weight elements.
pub fn supernet_gradcheck(cfg: &NetworkConfig, extent: usize, seed: u64, weight_samples: usize) -> EndToEndReport {
    // Gradients below the floor are compared absolutely (to 1e-8): at
    // ε = 1e-3 the truncation error of the stencil is of that order, which
    // for tiny gradients exceeds a 1e-4 relative mismatch.
    let fd = GradCheckConfig {
        floor: 1e-4,
        ..GradCheckConfig::default()
    };
    supernet_gradcheck_with(cfg, extent, seed, weight_samples, fd)
}

pub fn supernet_gradcheck_with(
    cfg: &NetworkConfig,
    extent: usize,
    seed: u64,
    weight_samples: usize,
    cfg_fd: GradCheckConfig,
) -> EndToEndReport {
    let net = randomized_supernet(cfg, seed);
    let mut shape = vec![2, cfg.in_channels];
    shape.extend(vec![extent; cfg.rank]);
    let x = uniform(&shape, seed + 1);
    let mut lshape = vec![2];
    lshape.extend(vec![extent; cfg.rank]);
    let y = labels(&lshape, cfg.num_classes as u8, seed + 2);
    let lambda = 1.0;

    let tape = Tape::new();
    let b = net.store().bind(&tape, |_| true);
    let loss = net.arch_loss(&b, &tape.constant(x.clone()), &y, lambda).unwrap();
    let grads = loss.backward().unwrap();

    let eval = |n: &Network| -> (f64, Vec<u32>) {
        let tape = Tape::new();
        let b = n.store().bind(&tape, |_| false);
        let loss = n.arch_loss(&b, &tape.constant(x.clone()), &y, lambda).unwrap().value().item();
        (loss, branch_pattern(&tape))
    };
    let (_, base_pattern) = eval(&net);

    let mut picks = Vec::new();
    let mut weights = Vec::new();
    for (id, p) in net.store().iter() {
        for e in 0..p.value.len() {
            if p.group.is_arch() {
                picks.push((id, e));
            } else {
                weights.push((id, e));
            }
        }
    }
    rand::seq::SliceRandom::shuffle(&mut weights[..], &mut rng(seed + 3));
    picks.extend(weights.into_iter().take(weight_samples));

    let mut report = EndToEndReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut work = net.clone();
    for (id, e) in picks {
        let base = net.store().value(id).data()[e];
        work.store_mut().value_mut(id).data_mut()[e] = base + cfg_fd.epsilon;
        let (plus, plus_pattern) = eval(&work);
        work.store_mut().value_mut(id).data_mut()[e] = base - cfg_fd.epsilon;
        let (minus, minus_pattern) = eval(&work);
        work.store_mut().value_mut(id).data_mut()[e] = base;
        if plus_pattern != base_pattern || minus_pattern != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * cfg_fd.epsilon);
        let analytic = grads.get(b.var(id)).map_or(0.0, |g| g.data()[e]);
        let err = relative_error(analytic, numeric, cfg_fd.floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = format!("{}[{e}]: analytic {analytic:.6e}, numeric {numeric:.6e}", net.store().get(id).name);
        }
    }
    report
}

/// Which side of every kink the recorded graph evaluated on: the sign of
/// each activation input and the winner of each 2-wide max-pool window.
pub fn branch_pattern(tape: &Tape) -> Vec<u32> {
    let trace = tape.trace();
    let mut out = Vec::new();
    for node in &trace {
        match node.op {
            "relu" | "leaky_relu" => {
                let x = &trace[node.inputs[0]].value;
                out.extend(x.data().iter().map(|&v| (v > 0.0) as u32));
            }
            "max_pool" => {
                let x = &trace[node.inputs[0]].value;
                let shape = x.shape();
                let sp: Vec<usize> = shape[2..].iter().map(|&e| e / 2).collect();
                let planes = shape[0] * shape[1];
                let in_plane: usize = shape[2..].iter().product();
                let cells: usize = sp.iter().product();
                let rank = sp.len();
                for p in 0..planes {
                    let data = &x.data()[p * in_plane..(p + 1) * in_plane];
                    for cell in 0..cells {
                        let mut c = vec![0; rank];
                        let mut r = cell;
                        for a in (0..rank).rev() {
                            c[a] = r % sp[a];
                            r /= sp[a];
                        }
                        let mut best = (f64::NEG_INFINITY, 0u32);
                        for k in 0..(1usize << rank) {
                            let mut idx = 0;
                            for a in 0..rank {
                                let bit = (k >> (rank - 1 - a)) & 1;
                                idx = idx * shape[2 + a] + 2 * c[a] + bit;
                            }
                            if data[idx] > best.0 {
                                best = (data[idx], k as u32);
                            }
                        }
                        out.push(best.1);
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn n(s: usize, l: usize) -> NodeId {
    NodeId::new(s, l)
}

/// Logits of a rank-2, three-level supernet written out node by node.
///
/// Edge order, alignment, gating, mixing and projections are spelled out
/// here instead of being taken from the network; only single candidate
/// operators are delegated.
pub fn unrolled_three_level(net: &Network, x: &Tensor) -> Tensor {
    let cfg = net.config();
    assert_eq!(cfg.geometry.levels, 3);
    let w0 = cfg.geometry.base_width;
    let width = |level: usize| w0 << level;
    let store = net.store();
    let tape = Tape::new();
    let b = store.bind(&tape, |_| false);
    let p = |name: &str| b.var(store.find(name).unwrap_or_else(|| panic!("missing {name}"))).clone();
    let project = |v: &Var, prefix: &str, cin: usize, cout: usize| -> Var {
        let spec = ConvSpec::cube(2, cin, cout, 1);
        nn::conv(v, &p(&format!("{prefix}.w")), Some(&p(&format!("{prefix}.b"))), &spec).unwrap()
    };
    let beta = store.value(net.beta().unwrap()).data().to_vec();
    let gate = |i: usize| 1.0 / (1.0 + (-beta[i]).exp());

    let stem_spec = ConvSpec::cube(2, 1, width(0), 3);
    let stem = nn::norm_act(&nn::conv(&tape.constant(x.clone()), &p("stem.w"), None, &stem_spec).unwrap()).unwrap();

    let mut values = std::collections::BTreeMap::new();
    values.insert(n(0, 0), stem);
    // (node, aligned-to level, [(source, beta index)]) in evaluation order.
    let plan: [(NodeId, usize, Vec<(NodeId, usize)>); 5] = [
        (n(0, 1), 0, vec![(n(0, 0), 0)]),
        (n(0, 2), 1, vec![(n(0, 0), 1), (n(0, 1), 2)]),
        (n(1, 0), 0, vec![(n(0, 0), 3), (n(0, 1), 4), (n(0, 2), 5)]),
        (n(1, 1), 1, vec![(n(0, 0), 6), (n(0, 1), 7), (n(0, 2), 8)]),
        (n(2, 0), 0, vec![(n(1, 0), 9), (n(1, 1), 10)]),
    ];
    for (node, target, inputs) in plan {
        let mut agg: Option<Var> = None;
        for (src, bi) in inputs {
            let mut v = values[&src].clone();
            let prefix = format!("e{}_{}-{}_{}.proj", src.stage, src.level, node.stage, node.level);
            let (cin, cout) = (width(src.level), width(target));
            if src.level > target {
                if cin != cout {
                    v = project(&v, &prefix, cin, cout);
                }
                v = nn::rescale_levels(&v, (src.level - target) as i32).unwrap();
            } else {
                v = nn::rescale_levels(&v, -((target - src.level) as i32)).unwrap();
                if cin != cout {
                    v = project(&v, &prefix, cin, cout);
                }
            }
            let v = v.scale(gate(bi)).unwrap();
            agg = Some(match agg {
                Some(a) => a.add(&v).unwrap(),
                None => v,
            });
        }
        let mut h = agg.unwrap();
        let block = &net.blocks()[&node];
        for layer in block.layers() {
            let alpha = layer.alpha_values(store).unwrap().to_vec();
            let mix = nn::softmax_values(&alpha);
            let mut out: Option<Var> = None;
            for (i, &m) in mix.iter().enumerate() {
                let term = layer.candidate_forward(&b, i, &h).unwrap().scale(m).unwrap();
                out = Some(match out {
                    Some(o) => o.add(&term).unwrap(),
                    None => term,
                });
            }
            h = out.unwrap();
        }
        if width(target) != width(node.level) {
            h = project(&h, &format!("n{}_{}.proj", node.stage, node.level), width(target), width(node.level));
        }
        values.insert(node, h);
    }
    project(&values[&n(2, 0)], "head", width(0), cfg.num_classes).value().clone()
}

pub fn forward_logits(net: &Network, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let b = net.store().bind(&tape, |_| false);
    net.forward(&b, &tape.constant(x.clone())).unwrap().value().clone()
}

/// Largest |supernet − unroll| over a few random three-level networks.
pub fn unroll_max_diff(trials: u64) -> f64 {
    (0..trials)
        .map(|t| {
            let net = randomized_supernet(&toy_config(3, 2, 2), 500 + t);
            let x = uniform(&[2, 1, 8, 8], 600 + t);
            forward_logits(&net, &x).max_abs_diff(&unrolled_three_level(&net, &x))
        })
        .fold(0.0, f64::max)
}

/// Saturates the supernet's gates and operator logits so that it computes
/// the same function as its derived network, then compares both.
pub fn derivation_max_diff(trials: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let cfg = toy_config(if t % 2 == 0 { 3 } else { 4 }, 2, 2);
        let geom = cfg.geometry;
        let mut net = Network::supernet(&cfg, 700 + t).unwrap();
        let mut r = rng(800 + t);
        let unet: BTreeSet<Edge> = geom.unet_edges().into_iter().collect();
        let beta_id = net.beta().unwrap();
        for (i, e) in geom.legal_edges().into_iter().enumerate() {
            let open = unet.contains(&e) || r.gen_bool(0.4);
            net.store_mut().value_mut(beta_id).data_mut()[i] = if open { 40.0 } else { -40.0 };
        }
        let alphas: Vec<_> = net.mixed_ops().filter_map(|(_, _, m)| m.alpha()).collect();
        for id in alphas {
            let a = net.store_mut().value_mut(id).data_mut();
            for v in a.iter_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
            let k = r.gen_range(0..a.len());
            a[k] += 40.0;
        }
        let arch = derive_architecture(&net, &PruneConfig::new(0.5).unwrap()).unwrap();
        assert!(arch.edges.iter().all(|e| !e.forced));
        let mut derived = arch.instantiate(900 + t).unwrap();
        let needed = derived.store().ids(|g| g == ParamGroup::Weight).len();
        assert_eq!(derived.store_mut().copy_from(net.store(), ParamGroup::Weight), needed);
        let x = uniform(&[1, 1, 16, 16], 950 + t);
        worst = worst.max(forward_logits(&net, &x).max_abs_diff(&forward_logits(&derived, &x)));
    }
    worst
}

/// Keep set by direct definition: gate at or above τ, and the destination
/// is the output or can still reach it through surviving edges.
pub fn prune_oracle(geom: &GridGeometry, edges: &[GatedEdge], tau: f64) -> BTreeSet<Edge> {
    let open: Vec<Edge> = edges.iter().filter(|g| g.gate >= tau).map(|g| g.edge).collect();
    // Reverse reachability, iterated to a fixpoint.
    let mut reaches: BTreeSet<NodeId> = BTreeSet::from([geom.output()]);
    loop {
        let before = reaches.len();
        for e in &open {
            if reaches.contains(&e.dst) {
                reaches.insert(e.src);
            }
        }
        if reaches.len() == before {
            break;
        }
    }
    open.into_iter().filter(|e| reaches.contains(&e.dst)).collect()
}

/// Forward reachability from the stem, iterated to a fixpoint.
pub fn reachable(geom: &GridGeometry, edges: &BTreeSet<Edge>) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([geom.stem()]);
    loop {
        let before = seen.len();
        for e in edges {
            if seen.contains(&e.src) {
                seen.insert(e.dst);
            }
        }
        if seen.len() == before {
            return seen;
        }
    }
}

/// A random lattice of at most 30 legal edges with gates in (0, 1).
pub fn random_grid(seed: u64) -> (GridGeometry, Vec<GatedEdge>) {
    let mut r = rng(seed);
    let geom = GridGeometry::new(r.gen_range(2..=4), 2);
    let edges = geom
        .legal_edges()
        .into_iter()
        .map(|edge| GatedEdge {
            edge,
            gate: r.gen_range(0.001..0.999),
        })
        .collect();
    (geom, edges)
}

/// All prune invariants on one grid; `Err` describes the first violation.
pub fn prune_properties(geom: &GridGeometry, edges: &[GatedEdge], taus: &[f64]) -> std::result::Result<(), String> {
    if edges.len() > 30 {
        return Err(format!("{} edges", edges.len()));
    }
    let kept = |tau: f64, fallback: bool| {
        let mut cfg = PruneConfig::new(tau).unwrap();
        cfg.fallback_connectivity = fallback;
        prune(geom, edges, &cfg).unwrap()
    };
    let mut sorted = taus.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut previous: Option<BTreeSet<Edge>> = None;
    for &tau in &sorted {
        let out = kept(tau, false);
        let got: BTreeSet<Edge> = out.kept_edges().into_iter().collect();
        let want = prune_oracle(geom, edges, tau);
        if got != want {
            return Err(format!("tau {tau}: kept {got:?}, oracle {want:?}"));
        }
        if let Some(prev) = &previous {
            if !got.is_subset(prev) {
                return Err(format!("tau {tau}: not monotone"));
            }
        }
        previous = Some(got);

        let with = kept(tau, true);
        let set: BTreeSet<Edge> = with.kept_edges().into_iter().collect();
        if !reachable(geom, &set).contains(&geom.output()) {
            return Err(format!("tau {tau}: output unreachable with fallback"));
        }
        if !with.used_fallback() && set != want {
            return Err(format!("tau {tau}: fallback changed a connected result"));
        }
        for fb in [false, true] {
            let first = kept(tau, fb);
            let mut cfg = PruneConfig::new(tau).unwrap();
            cfg.fallback_connectivity = fb;
            let again = prune(geom, &first.kept, &cfg).unwrap();
            if again.kept_edges() != first.kept_edges() {
                return Err(format!("tau {tau}, fallback {fb}: not idempotent"));
            }
        }
    }
    Ok(())
}

/// Dice from a full confusion matrix, one class at a time.
pub fn dice_by_confusion(pred: &LabelTensor, truth: &LabelTensor, classes: usize, class: usize) -> f64 {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        m[p as usize][t as usize] += 1;
    }
    let predicted: u64 = m[class].iter().sum();
    let actual: u64 = m.iter().map(|row| row[class]).sum();
    if predicted + actual == 0 {
        1.0
    } else {
        2.0 * m[class][class] as f64 / (predicted + actual) as f64
    }
}

/// Largest |dice − confusion oracle| over `pairs` random label pairs of
/// varied shape, sparsity and class count.
pub fn dice_max_error(pairs: u64) -> f64 {
    let mut r = rng(4242);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let classes = r.gen_range(2..=4usize);
        let rank = r.gen_range(1..=3);
        let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..=9)).collect();
        let len: usize = shape.iter().product();
        // Skewed draws make empty classes common.
        let bias = r.gen_range(0.0..1.0);
        let draw = |r: &mut ChaCha8Rng| -> Vec<u8> {
            (0..len)
                .map(|_| if r.gen_bool(bias) { 0 } else { r.gen_range(0..classes as u8) })
                .collect()
        };
        let pred = LabelTensor::new(shape.clone(), draw(&mut r)).unwrap();
        let truth = LabelTensor::new(shape, draw(&mut r)).unwrap();
        for c in 0..classes {
            let got = dice(&pred, &truth, c as u8).unwrap();
            worst = worst.max((got - dice_by_confusion(&pred, &truth, classes, c)).abs());
        }
    }
    worst
}

/// A small, quick task for search tests.
pub fn tiny_task(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        rank: 2,
        extent: 16,
        train_samples: 8,
        val_samples: 2,
        small_objects: 2,
        large_objects: 1,
        small_radius: [1.0, 1.5],
        large_radius: [3.0, 4.0],
        seed,
        ..SyntheticTaskSpec::default_2d()
    }
}

pub fn tiny_search_config(seed: u64) -> BiLevelConfig {
    BiLevelConfig {
        epochs: 2,
        seed,
        ..BiLevelConfig::default()
    }
}

/// Every parameter value as raw bits, in store order.
pub fn store_bits(net: &Network, pred: impl Fn(ParamGroup) -> bool) -> Vec<(String, Vec<u64>)> {
    net.store()
        .iter()
        .filter(|(_, p)| pred(p.group))
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Freeze contracts of both search steps plus bitwise reproducibility of a
/// seeded search; `Err` names the first violation.
pub fn freeze_and_reproducibility() -> std::result::Result<(), String> {
    let data = aggnas::tasks::generate(&tiny_task(3)).map_err(|e| e.to_string())?;
    let train = &data[..8];
    let cfg = toy_config(3, 2, 2);
    let make = || Searcher::new(Network::supernet(&cfg, 11).unwrap(), tiny_search_config(5), train.len()).unwrap();
    let weights = |g: ParamGroup| g == ParamGroup::Weight;
    let arch = |g: ParamGroup| g.is_arch();

    let mut s = make();
    let (x, y) = aggnas::trainer::assemble(&[&train[0], &train[1]], None);
    let before_arch = store_bits(&s.net, arch);
    let before_w = store_bits(&s.net, weights);
    s.weight_step(&x, &y).map_err(|e| e.to_string())?;
    if store_bits(&s.net, arch) != before_arch {
        return Err("weight step moved architecture parameters".into());
    }
    if store_bits(&s.net, weights) == before_w {
        return Err("weight step left the weights unchanged".into());
    }
    let before_w = store_bits(&s.net, weights);
    let before_arch = store_bits(&s.net, arch);
    s.arch_step(&x, &y).map_err(|e| e.to_string())?;
    if store_bits(&s.net, weights) != before_w {
        return Err("architecture step moved weights".into());
    }
    if store_bits(&s.net, arch) == before_arch {
        return Err("architecture step left the architecture unchanged".into());
    }

    let run = || {
        let mut s = make();
        s.run(train, |_| {}).unwrap();
        s
    };
    let (a, b) = (run(), run());
    if store_bits(&a.net, |_| true) != store_bits(&b.net, |_| true) {
        return Err("seeded searches ended with different parameters".into());
    }
    let rows = |s: &Searcher| format!("{:?}", s.rows());
    if rows(&a) != rows(&b) {
        return Err("seeded searches logged different metrics".into());
    }
    let mut other = Searcher::new(Network::supernet(&cfg, 11).unwrap(), tiny_search_config(6), train.len()).unwrap();
    other.run(train, |_| {}).unwrap();
    if store_bits(&other.net, |_| true) == store_bits(&a.net, |_| true) {
        return Err("a different search seed reproduced the same run".into());
    }
    Ok(())
}
