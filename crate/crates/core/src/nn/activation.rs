use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Var) -> Result<Var> {
    Tape::record(
        "relu",
        &[x],
        x.value().map(|v| v.max(0.0)),
        Box::new(|g, x, _| vec![Some(g.zip_map(x[0], |g, v| if v > 0.0 { g } else { 0.0 }))]),
    )
}

/// `max(x, slope * x)` for `0 <= slope < 1`.
pub fn leaky_relu(x: &Var, slope: f64) -> Result<Var> {
    Tape::record(
        "leaky_relu",
        &[x],
        x.value().map(|v| if v > 0.0 { v } else { slope * v }),
        Box::new(move |g, x, _| vec![Some(g.zip_map(x[0], |g, v| if v > 0.0 { g } else { slope * g }))]),
    )
}

pub fn sigmoid(x: &Var) -> Result<Var> {
    Tape::record(
        "sigmoid",
        &[x],
        x.value().map(sigmoid_scalar),
        Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, s| g * s * (1.0 - s)))]),
    )
}

/// Plain softmax of a logit vector.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax over a rank-1 tensor (the candidate axis of a mixed operator).
pub fn softmax(x: &Var) -> Result<Var> {
    if x.value().rank() != 1 {
        return Err(Error::shape(
            "softmax",
            format!("expects a rank-1 logit vector, got {:?}", x.shape()),
        ));
    }
    let value = Tensor::from_vec(softmax_values(x.value().data()));
    Tape::record(
        "softmax",
        &[x],
        value,
        Box::new(|g, _, y| {
            let inner = g.dot(y);
            vec![Some(g.zip_map(y, |g, p| p * (g - inner)))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = sigmoid(&x).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.5, 0.5]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid_scalar(-1000.0), 0.0);
        assert_eq!(sigmoid_scalar(1000.0), 1.0);
    }

    #[test]
    fn equal_logits_give_uniform_weights() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[7], 1.0));
        let y = softmax(&x).unwrap();
        for &p in y.value().data() {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
        assert!((y.value().sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relu_masks_negatives() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = relu(&x).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }
}
