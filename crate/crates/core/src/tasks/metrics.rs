use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelTensor;

/// `2|P ∩ T| / (|P| + |T|)` for class `class`; 1.0 when both are empty.
pub fn dice(pred: &LabelTensor, truth: &LabelTensor, class: u8) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "dice",
            format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    let (mut p, mut t, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        t += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + t) as f64)
}

/// Foreground Dice per class (classes `1..num_classes`) and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

impl DiceReport {
    /// Per-sample reports averaged class by class.
    pub fn average(reports: &[DiceReport]) -> Option<DiceReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let per_class: Vec<f64> = (0..first.per_class.len())
            .map(|c| reports.iter().map(|r| r.per_class[c]).sum::<f64>() / n)
            .collect();
        let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
        Some(DiceReport { per_class, mean })
    }
}

/// Dice of every foreground class of a single volume (batch dim excluded
/// or of size one).
pub fn foreground_dice(pred: &LabelTensor, truth: &LabelTensor, num_classes: usize) -> Result<DiceReport> {
    let per_class = (1..num_classes)
        .map(|c| dice(pred, truth, c as u8))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(DiceReport { per_class, mean })
}

/// Splits `[N, spatial…]` labels into per-sample tensors.
pub fn split_batch(labels: &LabelTensor) -> Vec<LabelTensor> {
    let shape = labels.shape();
    let per = shape[1..].iter().product::<usize>();
    labels
        .data()
        .chunks(per)
        .map(|c| LabelTensor::new(shape[1..].to_vec(), c.to_vec()).expect("chunk matches shape"))
        .collect()
}

/// Per-sample foreground Dice over a batch, averaged.
pub fn batch_dice(pred: &LabelTensor, truth: &LabelTensor, num_classes: usize) -> Result<DiceReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "dice",
            format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()),
        ));
    }
    let reports = split_batch(pred)
        .iter()
        .zip(split_batch(truth).iter())
        .map(|(p, t)| foreground_dice(p, t, num_classes))
        .collect::<Result<Vec<_>>>()?;
    DiceReport::average(&reports).ok_or_else(|| Error::shape("dice", "empty batch"))
}
