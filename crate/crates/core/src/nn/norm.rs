use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Normalizes every `(sample, channel)` plane to zero mean and unit variance
/// (biased variance, no affine).
pub fn instance_norm(x: &Var) -> Result<Var> {
    let shape = x.shape().to_vec();
    if shape.len() < 3 {
        return Err(Error::shape(
            "instance_norm",
            format!("needs [N, C, spatial...], got {shape:?}"),
        ));
    }
    let plane: usize = shape[2..].iter().product();
    let planes = shape[0] * shape[1];
    let xs = x.value().data();
    let mut out = vec![0.0; xs.len()];
    let mut inv_std = vec![0.0; planes];
    for p in 0..planes {
        let src = &xs[p * plane..][..plane];
        let mean = src.iter().sum::<f64>() / plane as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        inv_std[p] = inv;
        for (o, v) in out[p * plane..][..plane].iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
    }
    let value = Tensor::from_parts(shape.clone(), out);
    Tape::record(
        "instance_norm",
        &[x],
        value,
        Box::new(move |g, _, y| {
            let (gd, yd) = (g.data(), y.data());
            let mut gx = vec![0.0; gd.len()];
            let m = plane as f64;
            for p in 0..planes {
                let gp = &gd[p * plane..][..plane];
                let yp = &yd[p * plane..][..plane];
                let mean_g = gp.iter().sum::<f64>() / m;
                let mean_gy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / m;
                for ((o, gv), yv) in gx[p * plane..][..plane].iter_mut().zip(gp).zip(yp) {
                    *o = inv_std[p] * (gv - mean_g - yv * mean_gy);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }),
    )
}
