use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tasks::Sample;
use crate::tensor::{LabelTensor, Tensor};

/// Seeded generator on a numbered stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seeded shuffle of `0..n` cut into two disjoint, non-empty parts.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("search.split_fraction", format!("{fraction} is outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 0));
    let cut = (n as f64 * fraction).round() as usize;
    if cut == 0 || cut == n {
        return Err(Error::config(
            "search.split_fraction",
            format!("splitting {n} samples at {fraction} leaves one part empty"),
        ));
    }
    let b = idx.split_off(cut);
    Ok((idx, b))
}

/// Reverses the chosen spatial axes of a row-major `[spatial…]` buffer.
fn flip<T: Copy>(data: &[T], spatial: &[usize], axes: &[bool]) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; spatial.len()];
    for _ in 0..data.len() {
        let mut src = 0;
        for a in 0..spatial.len() {
            let i = if axes[a] { spatial[a] - 1 - idx[a] } else { idx[a] };
            src = src * spatial[a] + i;
        }
        out.push(data[src]);
        for a in (0..spatial.len()).rev() {
            idx[a] += 1;
            if idx[a] < spatial[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Stacks samples into `[N, 1, spatial…]` images and `[N, spatial…]`
/// labels, flipping each sample's axes at random when `rng` is given.
pub fn assemble(samples: &[&Sample], mut rng: Option<&mut ChaCha8Rng>) -> (Tensor, LabelTensor) {
    let spatial = samples[0].label.shape().to_vec();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let axes: Vec<bool> = match rng.as_deref_mut() {
            Some(r) => spatial.iter().map(|_| r.gen_bool(0.5)).collect(),
            None => vec![false; spatial.len()],
        };
        if axes.iter().any(|&a| a) {
            images.extend(flip(s.image.data(), &spatial, &axes));
            labels.extend(flip(s.label.data(), &spatial, &axes));
        } else {
            images.extend_from_slice(s.image.data());
            labels.extend_from_slice(s.label.data());
        }
    }
    let mut ishape = vec![samples.len(), 1];
    ishape.extend(&spatial);
    let mut lshape = vec![samples.len()];
    lshape.extend(&spatial);
    (
        Tensor::new(ishape, images).expect("stacked image shape"),
        LabelTensor::new(lshape, labels).expect("stacked label shape"),
    )
}

/// `order` cut into consecutive batches of at most `batch_size`.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
