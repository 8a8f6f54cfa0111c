//! Direct N-d convolution (rank 2 or 3) and its transpose.
//!
//! Rank-2 inputs run through the 3-d kernels with a unit depth axis. The
//! innermost loop is always a contiguous row so stride-1 rows vectorize.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub rank: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub dilation: Vec<usize>,
    pub padding: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding; kernels must be odd.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: &[usize],
        dilation: &[usize],
    ) -> Self {
        let rank = kernel.len();
        assert_eq!(dilation.len(), rank);
        assert!(kernel.iter().all(|k| k % 2 == 1), "same padding needs odd kernels");
        let padding = kernel
            .iter()
            .zip(dilation)
            .map(|(k, d)| d * (k - 1) / 2)
            .collect();
        Self {
            rank,
            kernel: kernel.to_vec(),
            stride: vec![1; rank],
            dilation: dilation.to_vec(),
            padding,
            in_channels,
            out_channels,
        }
    }

    /// Cubic kernel of extent `k` in every spatial dim.
    pub fn cube(rank: usize, in_channels: usize, out_channels: usize, k: usize) -> Self {
        Self::same(in_channels, out_channels, &vec![k; rank], &vec![1; rank])
    }

    /// Cubic kernel with uniform stride and padding.
    pub fn strided(
        rank: usize,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            rank,
            kernel: vec![k; rank],
            stride: vec![stride; rank],
            dilation: vec![1; rank],
            padding: vec![padding; rank],
            in_channels,
            out_channels,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels];
        s.extend_from_slice(&self.kernel);
        s
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// `floor((in + 2 pad - dil (k - 1) - 1) / stride) + 1` per dim.
    pub fn output_extent(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != self.rank {
            return Err(Error::shape(
                "conv",
                format!("spatial rank {} vs spec rank {}", input.len(), self.rank),
            ));
        }
        (0..self.rank)
            .map(|a| {
                let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
                let padded = input[a] + 2 * self.padding[a];
                if padded < span {
                    return Err(Error::shape(
                        "conv",
                        format!(
                            "dim {a}: input {} + 2*pad {} smaller than dilated kernel {}",
                            input[a], self.padding[a], span
                        ),
                    ));
                }
                Ok((padded - span) / self.stride[a] + 1)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let ok = (self.rank == 2 || self.rank == 3)
            && self.kernel.len() == self.rank
            && self.stride.len() == self.rank
            && self.dilation.len() == self.rank
            && self.padding.len() == self.rank
            && self.kernel.iter().all(|&k| k >= 1)
            && self.stride.iter().all(|&s| s >= 1)
            && self.dilation.iter().all(|&d| d >= 1)
            && self.in_channels >= 1
            && self.out_channels >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Unsupported {
                op: "conv",
                detail: format!("malformed spec {self:?}"),
            })
        }
    }
}

fn lift3(v: &[usize], fill: usize) -> [usize; 3] {
    match v.len() {
        2 => [fill, v[0], v[1]],
        3 => [v[0], v[1], v[2]],
        n => unreachable!("rank {n} not supported"),
    }
}

/// Geometry of one convolution, with rank-2 lifted to unit depth.
#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    dilation: [usize; 3],
    padding: [usize; 3],
}

/// Kernel index `t` along one axis reads input `o * stride + off` for output
/// positions `lo..hi`.
#[derive(Clone, Copy, Debug)]
struct Tap {
    off: isize,
    lo: usize,
    hi: usize,
}

fn axis_taps(input: usize, output: usize, k: usize, s: usize, d: usize, p: usize) -> Vec<Tap> {
    (0..k)
        .map(|t| {
            let off = (t * d) as isize - p as isize;
            // smallest o with o*s + off >= 0
            let lo = if off >= 0 {
                0
            } else {
                ((-off) as usize).div_ceil(s)
            };
            // largest o with o*s + off <= input - 1
            let last = input as isize - 1 - off;
            let hi = if last < 0 {
                0
            } else {
                (last as usize / s + 1).min(output)
            };
            Tap {
                off,
                lo: lo.min(hi),
                hi,
            }
        })
        .collect()
}

impl Geom {
    fn new(batch: usize, spec: &ConvSpec, input: &[usize], output: &[usize]) -> Self {
        Self {
            batch,
            cin: spec.in_channels,
            cout: spec.out_channels,
            input: lift3(input, 1),
            output: lift3(output, 1),
            kernel: lift3(&spec.kernel, 1),
            stride: lift3(&spec.stride, 1),
            dilation: lift3(&spec.dilation, 1),
            padding: lift3(&spec.padding, 0),
        }
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> [Vec<Tap>; 3] {
        std::array::from_fn(|a| {
            axis_taps(
                self.input[a],
                self.output[a],
                self.kernel[a],
                self.stride[a],
                self.dilation[a],
                self.padding[a],
            )
        })
    }

    /// Calls `row(kernel_offset, out_row_start, in_row_start, tap_x)` for
    /// every valid (kernel tap, output row) pair of one channel pair.
    #[inline(always)]
    fn for_each_row(&self, taps: &[Vec<Tap>; 3], mut row: impl FnMut(usize, usize, usize, &Tap)) {
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let [_, kh, kw] = self.kernel;
        for (tz, az) in taps[0].iter().enumerate() {
            for oz in az.lo..az.hi {
                let iz = (oz * self.stride[0]) as isize + az.off;
                for (ty, ay) in taps[1].iter().enumerate() {
                    for oy in ay.lo..ay.hi {
                        let iy = (oy * self.stride[1]) as isize + ay.off;
                        let out_row = (oz * oh + oy) * ow;
                        let in_row = (iz as usize * ih + iy as usize) * iw;
                        for (tx, ax) in taps[2].iter().enumerate() {
                            if ax.lo < ax.hi {
                                row((tz * kh + ty) * kw + tx, out_row, in_row, ax);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_raw(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Geom) -> Vec<f64> {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let ksz: usize = g.kernel.iter().product();
    let sx = g.stride[2];
    let taps = g.taps();
    let mut out = vec![0.0; g.batch * g.cout * op];
    for n in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * op..][..op];
            if let Some(b) = bias {
                o.fill(b[co]);
            }
            for ci in 0..g.cin {
                let xi = &x[(n * g.cin + ci) * ip..][..ip];
                let wk = &w[(co * g.cin + ci) * ksz..][..ksz];
                g.for_each_row(&taps, |k, orow, irow, t| {
                    let wv = wk[k];
                    if sx == 1 {
                        let start = (irow as isize + t.lo as isize + t.off) as usize;
                        let dst = &mut o[orow + t.lo..orow + t.hi];
                        let src = &xi[start..start + dst.len()];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in t.lo..t.hi {
                            let ix = (irow as isize + (ox * sx) as isize + t.off) as usize;
                            o[orow + ox] += wv * xi[ix];
                        }
                    }
                });
            }
        }
    }
    out
}

fn conv_grad_input_raw(gout: &[f64], w: &[f64], g: &Geom) -> Vec<f64> {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let ksz: usize = g.kernel.iter().product();
    let sx = g.stride[2];
    let taps = g.taps();
    let mut gin = vec![0.0; g.batch * g.cin * ip];
    for n in 0..g.batch {
        for ci in 0..g.cin {
            let gi = &mut gin[(n * g.cin + ci) * ip..][..ip];
            for co in 0..g.cout {
                let go = &gout[(n * g.cout + co) * op..][..op];
                let wk = &w[(co * g.cin + ci) * ksz..][..ksz];
                g.for_each_row(&taps, |k, orow, irow, t| {
                    let wv = wk[k];
                    if sx == 1 {
                        let start = (irow as isize + t.lo as isize + t.off) as usize;
                        let src = &go[orow + t.lo..orow + t.hi];
                        let dst = &mut gi[start..start + src.len()];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    } else {
                        for ox in t.lo..t.hi {
                            let ix = (irow as isize + (ox * sx) as isize + t.off) as usize;
                            gi[ix] += wv * go[orow + ox];
                        }
                    }
                });
            }
        }
    }
    gin
}

fn conv_grad_weight_raw(gout: &[f64], x: &[f64], g: &Geom) -> Vec<f64> {
    let (ip, op) = (g.in_plane(), g.out_plane());
    let ksz: usize = g.kernel.iter().product();
    let sx = g.stride[2];
    let taps = g.taps();
    let mut gw = vec![0.0; g.cout * g.cin * ksz];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            let gk = &mut gw[(co * g.cin + ci) * ksz..][..ksz];
            for n in 0..g.batch {
                let go = &gout[(n * g.cout + co) * op..][..op];
                let xi = &x[(n * g.cin + ci) * ip..][..ip];
                g.for_each_row(&taps, |k, orow, irow, t| {
                    let acc: f64 = if sx == 1 {
                        let start = (irow as isize + t.lo as isize + t.off) as usize;
                        let a = &go[orow + t.lo..orow + t.hi];
                        let b = &xi[start..start + a.len()];
                        a.iter().zip(b).map(|(p, q)| p * q).sum()
                    } else {
                        (t.lo..t.hi)
                            .map(|ox| {
                                let ix = (irow as isize + (ox * sx) as isize + t.off) as usize;
                                go[orow + ox] * xi[ix]
                            })
                            .sum()
                    };
                    gk[k] += acc;
                });
            }
        }
    }
    gw
}

fn bias_grad(gout: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; channels];
    for n in 0..batch {
        for (c, slot) in gb.iter_mut().enumerate() {
            *slot += gout[(n * channels + c) * plane..][..plane].iter().sum::<f64>();
        }
    }
    gb
}

fn check_input(op: &'static str, x: &Var, rank: usize, channels: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != rank + 2 {
        return Err(Error::shape(
            op,
            format!("expected rank-{} input, got shape {s:?}", rank + 2),
        ));
    }
    if s[1] != channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, spec expects {channels}", s[1]),
        ));
    }
    Ok(())
}

/// Convolution of `x` `[N, Cin, spatial...]` with weights `[Cout, Cin, kernel...]`.
pub fn conv(x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    check_input("conv", x, spec.rank, spec.in_channels)?;
    if w.shape() != spec.weight_shape().as_slice() {
        return Err(Error::shape(
            "conv",
            format!("weight shape {:?}, spec needs {:?}", w.shape(), spec.weight_shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv",
                format!("bias shape {:?}, expected [{}]", b.shape(), spec.out_channels),
            ));
        }
    }
    let batch = x.shape()[0];
    let out_sp = spec.output_extent(x.value().spatial())?;
    let g = Geom::new(batch, spec, x.value().spatial(), &out_sp);
    let data = conv_forward_raw(
        x.value().data(),
        w.value().data(),
        b.map(|b| b.value().data()),
        &g,
    );
    let mut shape = vec![batch, spec.out_channels];
    shape.extend_from_slice(&out_sp);
    let value = Tensor::from_parts(shape, data);

    let x_shape = x.shape().to_vec();
    let w_shape = w.shape().to_vec();
    let backward = Box::new(move |gout: &Tensor, inputs: &[&Tensor], _: &Tensor| {
        let gx = conv_grad_input_raw(gout.data(), inputs[1].data(), &g);
        let gw = conv_grad_weight_raw(gout.data(), inputs[0].data(), &g);
        let mut grads = vec![
            Some(Tensor::from_parts(x_shape.clone(), gx)),
            Some(Tensor::from_parts(w_shape.clone(), gw)),
        ];
        if inputs.len() == 3 {
            let gb = bias_grad(gout.data(), g.batch, g.cout, g.out_plane());
            grads.push(Some(Tensor::from_parts(vec![g.cout], gb)));
        }
        grads
    });
    match b {
        Some(b) => Tape::record("conv", &[x, w, b], value, backward),
        None => Tape::record("conv", &[x, w], value, backward),
    }
}

/// Transposed convolution, the adjoint of a strided `conv`.
///
/// `spec.in_channels` is the channel count of `x`, `spec.out_channels` that
/// of the result, and `w` has shape `[in, out, kernel...]`. Only stride 2 is
/// supported and the output doubles every spatial extent; the spec's kernel
/// and padding must map an extent of `2n` back to `n` under `conv`.
pub fn transpose_conv(x: &Var, w: &Var, spec: &ConvSpec) -> Result<Var> {
    spec.validate()?;
    if spec.stride.iter().any(|&s| s != 2) {
        return Err(Error::Unsupported {
            op: "transpose_conv",
            detail: format!("stride {:?}; only stride 2 is supported", spec.stride),
        });
    }
    check_input("transpose_conv", x, spec.rank, spec.in_channels)?;
    // the forward conv this is the adjoint of
    let adjoint = ConvSpec {
        in_channels: spec.out_channels,
        out_channels: spec.in_channels,
        ..spec.clone()
    };
    if w.shape() != adjoint.weight_shape().as_slice() {
        return Err(Error::shape(
            "transpose_conv",
            format!("weight shape {:?}, expected {:?}", w.shape(), adjoint.weight_shape()),
        ));
    }
    let small = x.value().spatial().to_vec();
    let big: Vec<usize> = small.iter().map(|&e| 2 * e).collect();
    if adjoint.output_extent(&big)? != small {
        return Err(Error::Unsupported {
            op: "transpose_conv",
            detail: format!(
                "kernel {:?} / padding {:?} does not map {big:?} back to {small:?}",
                spec.kernel, spec.padding
            ),
        });
    }
    let batch = x.shape()[0];
    let g = Geom::new(batch, &adjoint, &big, &small);
    let data = conv_grad_input_raw(x.value().data(), w.value().data(), &g);
    let mut shape = vec![batch, spec.out_channels];
    shape.extend_from_slice(&big);
    let value = Tensor::from_parts(shape, data);
    let x_shape = x.shape().to_vec();
    let w_shape = w.shape().to_vec();
    Tape::record(
        "transpose_conv",
        &[x, w],
        value,
        Box::new(move |gout, inputs, _| {
            let gx = conv_forward_raw(gout.data(), inputs[1].data(), None, &g);
            let gw = conv_grad_weight_raw(inputs[0].data(), gout.data(), &g);
            vec![
                Some(Tensor::from_parts(x_shape.clone(), gx)),
                Some(Tensor::from_parts(w_shape.clone(), gw)),
            ]
        }),
    )
}
