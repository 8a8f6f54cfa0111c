//! Two-scale synthetic segmentation volumes.
//!
//! Every object has the same intensity range; the two foreground classes
//! differ only in size, so telling them apart needs context at several
//! scales.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelTensor, Tensor};

pub const NUM_CLASSES: usize = 3;
pub const BACKGROUND: u8 = 0;
pub const SMALL_CLASS: u8 = 1;
pub const LARGE_CLASS: u8 = 2;
pub const PRNG_NAME: &str = "chacha8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub rank: usize,
    /// Extent of every spatial axis.
    pub extent: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Objects that fail to find a clear spot after 200 draws are skipped.
    pub small_objects: usize,
    pub large_objects: usize,
    pub small_radius: [f64; 2],
    pub large_radius: [f64; 2],
    pub noise_std: f64,
    /// Subsamples per axis for anti-aliased coverage.
    pub supersample: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self::default_2d()
    }
}

impl SyntheticTaskSpec {
    pub fn default_2d() -> Self {
        Self {
            rank: 2,
            extent: 64,
            train_samples: 32,
            val_samples: 16,
            // Ten small objects cover about as many pixels as one large one,
            // so cross-entropy weighs the two scales like mean Dice does.
            small_objects: 10,
            large_objects: 1,
            small_radius: [2.0, 4.0],
            large_radius: [8.0, 12.0],
            noise_std: 0.1,
            supersample: 4,
            seed: 0,
        }
    }

    pub fn default_3d() -> Self {
        Self {
            rank: 3,
            extent: 32,
            small_radius: [2.0, 3.0],
            large_radius: [5.0, 7.0],
            ..Self::default_2d()
        }
    }

    pub fn num_samples(&self) -> usize {
        self.train_samples + self.val_samples
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        vec![self.extent; self.rank]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(Error::config(&format!("task.{field}"), reason));
        if self.rank != 2 && self.rank != 3 {
            return bad("rank", format!("{} is not 2 or 3", self.rank));
        }
        if self.train_samples == 0 {
            return bad("train_samples", "must be positive".into());
        }
        if self.supersample == 0 {
            return bad("supersample", "must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", format!("{} is not a finite non-negative std", self.noise_std));
        }
        for (field, r) in [("small_radius", self.small_radius), ("large_radius", self.large_radius)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(field, format!("{r:?} is not an increasing positive range"));
            }
        }
        let need = 2.0 * Shape::MAX_BOUND * self.large_radius[1].max(self.small_radius[1]) + 1.0;
        if need > self.extent as f64 {
            return bad(
                "extent",
                format!("{} is too small for radius up to {} (need {need})", self.extent, self.large_radius[1]),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Sphere,
    /// Axis-aligned box with per-axis half sizes.
    Cuboid([f64; 3]),
    /// Capsule around a segment of half length `0.75 r` along a unit vector.
    Tube([f64; 3]),
}

impl Shape {
    /// Bounding radius as a multiple of the object radius.
    const MAX_BOUND: f64 = 1.75;

    fn bound(&self, r: f64) -> f64 {
        match self {
            Shape::Sphere => r,
            Shape::Cuboid(h) => (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
            Shape::Tube(_) => Self::MAX_BOUND * r,
        }
    }
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    center: [f64; 3],
    radius: f64,
    intensity: f64,
    class: u8,
}

impl Object {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let r = self.radius;
        match self.shape {
            Shape::Sphere => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= r * r,
            Shape::Cuboid(h) => (0..3).all(|a| d[a].abs() <= h[a]),
            Shape::Tube(u) => {
                let half = 0.75 * r;
                let t = (d[0] * u[0] + d[1] * u[1] + d[2] * u[2]).clamp(-half, half);
                let q = [d[0] - t * u[0], d[1] - t * u[1], d[2] - t * u[2]];
                q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= r * r
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, spatial…]`, zero mean and unit std.
    pub image: Tensor,
    /// `[spatial…]`.
    pub label: LabelTensor,
}

/// Internal 3-axis extents; 2D volumes have unit depth.
fn dims(spec: &SyntheticTaskSpec) -> [usize; 3] {
    let e = spec.extent;
    if spec.rank == 3 {
        [e, e, e]
    } else {
        [1, e, e]
    }
}

fn place_objects(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Vec<Object> {
    let d = dims(spec);
    let active: Vec<usize> = (0..3).filter(|&a| d[a] > 1).collect();
    let mut objects: Vec<Object> = Vec::new();
    let plan = std::iter::repeat((LARGE_CLASS, spec.large_radius))
        .take(spec.large_objects)
        .chain(std::iter::repeat((SMALL_CLASS, spec.small_radius)).take(spec.small_objects));
    for (class, [lo, hi]) in plan {
        let radius = rng.gen_range(lo..=hi);
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Sphere,
            1 => {
                let mut h = [0.0; 3];
                for &a in &active {
                    h[a] = radius * rng.gen_range(0.7..=1.0);
                }
                Shape::Cuboid(h)
            }
            _ => {
                let mut u = [0.0f64; 3];
                loop {
                    for &a in &active {
                        u[a] = StandardNormal.sample(rng);
                    }
                    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                    if n > 1e-6 {
                        u.iter_mut().for_each(|v| *v /= n);
                        break;
                    }
                }
                Shape::Tube(u)
            }
        };
        let intensity = rng.gen_range(0.7..=1.0);
        let bound = shape.bound(radius);
        for _ in 0..200 {
            let mut center = [0.0; 3];
            for &a in &active {
                center[a] = rng.gen_range(bound..=(d[a] as f64 - 1.0 - bound));
            }
            let clear = objects.iter().all(|o| {
                let dist = (0..3).map(|a: usize| (o.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                dist > o.shape.bound(o.radius) + bound + 1.0
            });
            if clear {
                objects.push(Object {
                    shape,
                    center,
                    radius,
                    intensity,
                    class,
                });
                break;
            }
        }
    }
    objects
}

fn render(spec: &SyntheticTaskSpec, objects: &[Object], rng: &mut ChaCha8Rng) -> Sample {
    let d = dims(spec);
    let n = d[0] * d[1] * d[2];
    let mut image = vec![0.0; n];
    let mut label = vec![BACKGROUND; n];
    let s = spec.supersample;
    let offsets: Vec<f64> = (0..s).map(|k| (k as f64 + 0.5) / s as f64 - 0.5).collect();
    let zero = [0.0];
    let axis_offsets = |a: usize| if d[a] > 1 { &offsets[..] } else { &zero[..] };
    for o in objects {
        let b = o.shape.bound(o.radius) + 1.0;
        let range = |a: usize| {
            let lo = (o.center[a] - b).floor().max(0.0) as usize;
            let hi = ((o.center[a] + b).ceil() as usize).min(d[a] - 1);
            lo..=hi
        };
        let total = (axis_offsets(0).len() * axis_offsets(1).len() * axis_offsets(2).len()) as f64;
        for z in range(0) {
            for y in range(1) {
                for x in range(2) {
                    let idx = (z * d[1] + y) * d[2] + x;
                    let p = [z as f64, y as f64, x as f64];
                    if o.contains(p) {
                        label[idx] = o.class;
                    }
                    let mut hits = 0usize;
                    for &dz in axis_offsets(0) {
                        for &dy in axis_offsets(1) {
                            for &dx in axis_offsets(2) {
                                hits += o.contains([p[0] + dz, p[1] + dy, p[2] + dx]) as usize;
                            }
                        }
                    }
                    let v = o.intensity * hits as f64 / total;
                    image[idx] = f64::max(image[idx], v);
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        for v in image.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += spec.noise_std * z;
        }
    }
    let mean = image.iter().sum::<f64>() / n as f64;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    image.iter_mut().for_each(|v| *v = (*v - mean) * inv);

    let spatial = spec.spatial_shape();
    let mut image_shape = vec![1];
    image_shape.extend(&spatial);
    Sample {
        image: Tensor::new(image_shape, image).expect("image shape"),
        label: LabelTensor::new(spatial, label).expect("label shape"),
    }
}

/// The sample at `index`, drawn from its own stream of the seeded generator.
pub fn generate_sample(spec: &SyntheticTaskSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let objects = place_objects(spec, &mut rng);
    Ok(render(spec, &objects, &mut rng))
}

/// All `train_samples + val_samples` samples, in index order.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.num_samples())
        .into_par_iter()
        .map(|i| generate_sample(spec, i))
        .collect()
}
