use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimizer step. Architecture columns are empty when the network has
/// nothing to search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss_w: f64,
    pub loss_arch: Option<f64>,
    pub mean_gate: Option<f64>,
    pub alpha_entropy: Option<f64>,
    /// Mean foreground Dice of the weight-step batch.
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss_w: f64,
    pub loss_arch: Option<f64>,
    pub mean_gate: Option<f64>,
    /// Mean `|σ(β) - 0.5|`.
    pub gate_separation: Option<f64>,
    pub alpha_entropy: Option<f64>,
    pub dice: f64,
}

pub(crate) fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub(crate) fn summarize(epoch: usize, rows: &[MetricsRow], gate_separation: Option<f64>) -> EpochSummary {
    EpochSummary {
        epoch,
        loss_w: mean(rows.iter().map(|r| r.loss_w)).unwrap_or(f64::NAN),
        loss_arch: mean(rows.iter().filter_map(|r| r.loss_arch)),
        mean_gate: rows.last().and_then(|r| r.mean_gate),
        gate_separation,
        alpha_entropy: rows.last().and_then(|r| r.alpha_entropy),
        dice: mean(rows.iter().map(|r| r.dice)).unwrap_or(f64::NAN),
    }
}

const METRICS_HEADER: [&str; 8] = [
    "config_hash",
    "step",
    "epoch",
    "loss_w",
    "loss_arch",
    "mean_gate",
    "alpha_entropy",
    "dice",
];

/// One line per step, each tagged with the hash of the run config.
pub fn write_metrics_csv(path: &Path, config_hash: &str, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("{other:?}"),
            },
        })?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.serialize((config_hash, r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of a metrics file and the config hash they carry.
pub fn read_metrics_csv(path: &Path) -> Result<(String, Vec<MetricsRow>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(METRICS_HEADER) {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("unexpected header {headers:?}"),
        });
    }
    let field_names = csv::StringRecord::from(&METRICS_HEADER[1..]);
    let mut hash = String::new();
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        hash = record[0].to_string();
        let rest: csv::StringRecord = record.iter().skip(1).collect();
        rows.push(rest.deserialize(Some(&field_names))?);
    }
    Ok((hash, rows))
}
