//! Separable linear resampling by factors of two.
//!
//! Upsampling is corner aligned: output sample `i` of `2n` reads input
//! position `i (n - 1) / (2n - 1)`. Downsampling averages adjacent pairs,
//! which is 2x average pooling along that axis.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Up2,
    Down2,
}

/// Each output index along the axis as a weighted sum of input indices.
fn taps(mode: Resample, n: usize) -> Vec<Vec<(usize, f64)>> {
    match mode {
        Resample::Up2 => {
            let m = 2 * n;
            (0..m)
                .map(|i| {
                    if n == 1 {
                        return vec![(0, 1.0)];
                    }
                    let num = i * (n - 1);
                    let den = m - 1;
                    let lo = num / den;
                    let frac = (num % den) as f64 / den as f64;
                    if frac == 0.0 || lo + 1 >= n {
                        vec![(lo, 1.0)]
                    } else {
                        vec![(lo, 1.0 - frac), (lo + 1, frac)]
                    }
                })
                .collect()
        }
        Resample::Down2 => (0..n / 2)
            .map(|i| vec![(2 * i, 0.5), (2 * i + 1, 0.5)])
            .collect(),
    }
}

fn apply(
    src: &[f64],
    outer: usize,
    n_in: usize,
    inner: usize,
    table: &[Vec<(usize, f64)>],
) -> Vec<f64> {
    let n_out = table.len();
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        for (i, row) in table.iter().enumerate() {
            let dst = &mut out[(o * n_out + i) * inner..][..inner];
            for &(j, w) in row {
                let s = &src[(o * n_in + j) * inner..][..inner];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

fn apply_transpose(
    g: &[f64],
    outer: usize,
    n_in: usize,
    inner: usize,
    table: &[Vec<(usize, f64)>],
) -> Vec<f64> {
    let n_out = table.len();
    let mut out = vec![0.0; outer * n_in * inner];
    for o in 0..outer {
        for (i, row) in table.iter().enumerate() {
            let s = &g[(o * n_out + i) * inner..][..inner];
            for &(j, w) in row {
                let dst = &mut out[(o * n_in + j) * inner..][..inner];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

fn resample_axis(x: &Var, axis: usize, mode: Resample) -> Result<Var> {
    let shape = x.shape().to_vec();
    let n = shape[axis];
    if mode == Resample::Down2 && n % 2 != 0 {
        return Err(Error::Unsupported {
            op: "interpolate",
            detail: format!("cannot halve odd extent {n} on axis {axis}"),
        });
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let table = taps(mode, n);
    let mut out_shape = shape.clone();
    out_shape[axis] = table.len();
    let value = Tensor::from_parts(
        out_shape,
        apply(x.value().data(), outer, n, inner, &table),
    );
    Tape::record(
        "interpolate",
        &[x],
        value,
        Box::new(move |g, _, _| {
            vec![Some(Tensor::from_parts(
                shape.clone(),
                apply_transpose(g.data(), outer, n, inner, &table),
            ))]
        }),
    )
}

/// Linear resampling with a per-spatial-dim scale of 1/2, 1 or 2.
pub fn interpolate(x: &Var, scale: &[f64]) -> Result<Var> {
    let rank = x.shape().len().saturating_sub(2);
    if scale.len() != rank || rank == 0 {
        return Err(Error::shape(
            "interpolate",
            format!("scale {scale:?} for input {:?}", x.shape()),
        ));
    }
    let mut y = x.clone();
    for (a, &s) in scale.iter().enumerate() {
        let mode = if s == 2.0 {
            Resample::Up2
        } else if s == 0.5 {
            Resample::Down2
        } else if s == 1.0 {
            continue;
        } else {
            return Err(Error::Unsupported {
                op: "interpolate",
                detail: format!("scale {s}; only 1/2, 1 and 2 are supported"),
            });
        };
        y = resample_axis(&y, a + 2, mode)?;
    }
    Ok(y)
}

/// Resamples all spatial dims by `2^(levels)`; negative levels downsample.
pub fn rescale_levels(x: &Var, levels: i32) -> Result<Var> {
    let rank = x.shape().len() - 2;
    let factor = if levels > 0 { 2.0 } else { 0.5 };
    let mut y = x.clone();
    for _ in 0..levels.unsigned_abs() {
        y = interpolate(&y, &vec![factor; rank])?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unit_scale_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[1, 2, 3, 4], 1.0, &mut rand::thread_rng()));
        let y = interpolate(&x, &[1.0, 1.0]).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn corner_aligned_upsample() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap());
        let y = interpolate(&x, &[1.0, 2.0]).unwrap();
        let expect = [1.0, 5.0 / 3.0, 7.0 / 3.0, 3.0];
        for (a, b) in y.value().data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_survive_down_then_up() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 4, 4], 2.5));
        let y = rescale_levels(&rescale_levels(&x, -1).unwrap(), 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn downsample_is_pair_average() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = interpolate(&x, &[0.5, 0.5]).unwrap();
        assert_eq!(y.value().data(), &[2.5]);
    }

    #[test]
    fn rejects_other_scales_and_odd_halving() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(interpolate(&x, &[1.0, 3.0]).is_err());
        assert!(interpolate(&x, &[0.5, 1.0]).is_err());
    }

    #[test]
    fn adjoint_identity_holds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for levels in [-2, -1, 1, 2] {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::uniform(&[1, 2, 4, 8], 1.0, &mut rng));
            let y = rescale_levels(&x, levels).unwrap();
            let probe = Tensor::uniform(y.shape(), 1.0, &mut rng);
            let p = tape.constant(probe.clone());
            let g = y.mul(&p).unwrap().sum().unwrap().backward().unwrap();
            // <R x, p> == <x, R^T p>
            let lhs = y.value().dot(&probe);
            let rhs = x.value().dot(g.get(&x).unwrap());
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
