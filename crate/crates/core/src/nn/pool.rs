use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Unpadded max or average pooling over the spatial dims.
///
/// Max pooling routes the gradient to the first maximum in row-major window
/// order.
pub fn pool(x: &Var, kind: PoolKind, window: &[usize], stride: &[usize]) -> Result<Var> {
    let shape = x.shape().to_vec();
    let rank = shape.len().saturating_sub(2);
    if !(rank == 2 || rank == 3) || window.len() != rank || stride.len() != rank {
        return Err(Error::shape(
            "pool",
            format!("input {shape:?}, window {window:?}, stride {stride:?}"),
        ));
    }
    let sp = &shape[2..];
    if window.iter().zip(sp).any(|(w, e)| w > e || *w == 0) || stride.contains(&0) {
        return Err(Error::shape(
            "pool",
            format!("window {window:?} does not fit spatial extent {sp:?}"),
        ));
    }
    let out_sp: Vec<usize> = (0..rank).map(|a| (sp[a] - window[a]) / stride[a] + 1).collect();

    let lift = |v: &[usize], fill| -> [usize; 3] {
        if v.len() == 2 {
            [fill, v[0], v[1]]
        } else {
            [v[0], v[1], v[2]]
        }
    };
    let inp = lift(sp, 1);
    let out = lift(&out_sp, 1);
    let win = lift(window, 1);
    let st = lift(stride, 1);
    let planes = shape[0] * shape[1];
    let (ip, op) = (inp.iter().product::<usize>(), out.iter().product::<usize>());
    let count = win.iter().product::<usize>() as f64;

    let xs = x.value().data();
    let mut data = vec![0.0; planes * op];
    // flat input index feeding each max output
    let mut argmax = match kind {
        PoolKind::Max => vec![0usize; planes * op],
        PoolKind::Avg => Vec::new(),
    };
    for plane in 0..planes {
        let xp = &xs[plane * ip..][..ip];
        for oz in 0..out[0] {
            for oy in 0..out[1] {
                for ox in 0..out[2] {
                    let o = plane * op + (oz * out[1] + oy) * out[2] + ox;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0;
                    let mut acc = 0.0;
                    for wz in 0..win[0] {
                        for wy in 0..win[1] {
                            for wx in 0..win[2] {
                                let i = ((oz * st[0] + wz) * inp[1] + oy * st[1] + wy) * inp[2]
                                    + ox * st[2]
                                    + wx;
                                let v = xp[i];
                                acc += v;
                                if v > best {
                                    best = v;
                                    best_at = i;
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            data[o] = best;
                            argmax[o] = plane * ip + best_at;
                        }
                        PoolKind::Avg => data[o] = acc / count,
                    }
                }
            }
        }
    }
    let mut out_shape = shape[..2].to_vec();
    out_shape.extend_from_slice(&out_sp);
    let value = Tensor::from_parts(out_shape, data);

    let in_len = xs.len();
    let backward: Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>> = match kind {
        PoolKind::Max => Box::new(move |g, _, _| {
            let mut gx = vec![0.0; in_len];
            for (o, &i) in argmax.iter().enumerate() {
                gx[i] += g.data()[o];
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }),
        PoolKind::Avg => Box::new(move |g, _, _| {
            let mut gx = vec![0.0; in_len];
            let gd = g.data();
            for plane in 0..planes {
                for oz in 0..out[0] {
                    for oy in 0..out[1] {
                        for ox in 0..out[2] {
                            let gv = gd[plane * op + (oz * out[1] + oy) * out[2] + ox] / count;
                            for wz in 0..win[0] {
                                for wy in 0..win[1] {
                                    for wx in 0..win[2] {
                                        let i = ((oz * st[0] + wz) * inp[1] + oy * st[1] + wy)
                                            * inp[2]
                                            + ox * st[2]
                                            + wx;
                                        gx[plane * ip + i] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }),
    };
    let op = match kind {
        PoolKind::Max => "max_pool",
        PoolKind::Avg => "avg_pool",
    };
    Tape::record(op, &[x], value, backward)
}
