use crate::error::{Error, Result};
use crate::tensor::{LabelTensor, Tape, Tensor, Var};

fn check_logits(op: &'static str, logits: &[usize], labels: &[usize]) -> Result<()> {
    let ok = logits.len() >= 3
        && labels.len() == logits.len() - 1
        && labels[0] == logits[0]
        && labels[1..] == logits[2..];
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("logits {logits:?} vs labels {labels:?}"),
        ))
    }
}

/// Mean over batch and voxels of `-log softmax(logits)[label]`, softmax taken
/// over the channel axis of `[N, classes, spatial...]`.
pub fn cross_entropy(logits: &Var, labels: &LabelTensor) -> Result<Var> {
    let shape = logits.shape().to_vec();
    check_logits("cross_entropy", &shape, labels.shape())?;
    let (batch, classes) = (shape[0], shape[1]);
    if let Some(&bad) = labels.data().iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: classes,
        });
    }
    let plane: usize = shape[2..].iter().product();
    let count = (batch * plane) as f64;
    let xs = logits.value().data();
    let lab = labels.data();
    // softmax probabilities, reused by the backward rule
    let mut probs = vec![0.0; xs.len()];
    let mut total = 0.0;
    for n in 0..batch {
        for v in 0..plane {
            let at = |c: usize| (n * classes + c) * plane + v;
            let max = (0..classes).map(|c| xs[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..classes).map(|c| (xs[at(c)] - max).exp()).sum();
            for c in 0..classes {
                probs[at(c)] = (xs[at(c)] - max).exp() / z;
            }
            let target = lab[n * plane + v] as usize;
            total += z.ln() + max - xs[at(target)];
        }
    }
    let labels = labels.clone();
    Tape::record(
        "cross_entropy",
        &[logits],
        Tensor::scalar(total / count),
        Box::new(move |g, _, _| {
            let scale = g.item() / count;
            let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for n in 0..batch {
                for v in 0..plane {
                    let target = labels.data()[n * plane + v] as usize;
                    gx[(n * classes + target) * plane + v] -= scale;
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), gx))]
        }),
    )
}

/// Per-voxel argmax over the class axis (first maximum on ties).
pub fn argmax_classes(logits: &Tensor) -> LabelTensor {
    let shape = logits.shape();
    let (batch, classes) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let xs = logits.data();
    let mut out = Vec::with_capacity(batch * plane);
    for n in 0..batch {
        for v in 0..plane {
            let mut best = 0;
            for c in 1..classes {
                if xs[(n * classes + c) * plane + v] > xs[(n * classes + best) * plane + v] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    let mut label_shape = vec![batch];
    label_shape.extend_from_slice(&shape[2..]);
    LabelTensor::new(label_shape, out).expect("shape derived from logits")
}
