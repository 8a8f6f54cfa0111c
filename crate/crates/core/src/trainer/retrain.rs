//! Single-level training of fixed networks and Dice evaluation.

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::batch::{assemble, batches, stream_rng};
use super::metrics::{summarize, EpochSummary, MetricsRow};
use super::search::loss_and_grads;
use crate::aggregation::{reachable_from_stem, DerivedArchitecture, Network};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamGroup;
use crate::tasks::{foreground_dice, DiceReport, Sample};
use crate::tensor::{LabelTensor, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::weights(),
            epochs: 20,
            batch_size: 2,
            seed: 0,
            flip_augmentation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate("retrain.optimizer")?;
        if self.batch_size == 0 {
            return Err(Error::config("retrain.batch_size", "must be positive"));
        }
        Ok(())
    }
}

fn is_weight(g: ParamGroup) -> bool {
    g == ParamGroup::Weight
}

/// Plain cross-entropy training of every weight of a network.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: Network,
    pub config: TrainConfig,
    pub opt: Adam,
    epoch: usize,
    step: u64,
    rows: Vec<MetricsRow>,
    history: Vec<EpochSummary>,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net,
            opt: Adam::new(config.optimizer),
            config,
            epoch: 0,
            step: 0,
            rows: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn history(&self) -> &[EpochSummary] {
        &self.history
    }

    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<EpochSummary> {
        let mut rng = stream_rng(self.config.seed, 1 + self.epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let flips = self.config.flip_augmentation;
        let mut rows = Vec::new();
        for batch in batches(&order, self.config.batch_size) {
            let picked: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let (x, y) = assemble(&picked, flips.then_some(&mut rng));
            let out = loss_and_grads(&self.net, &x, &y, is_weight, 0.0)?;
            self.opt.step(self.net.store_mut(), &out.grads)?;
            let pred = nn::argmax_classes(&out.logits);
            self.step += 1;
            rows.push(MetricsRow {
                step: self.step,
                epoch: self.epoch,
                loss_w: out.loss,
                loss_arch: None,
                mean_gate: None,
                alpha_entropy: None,
                dice: crate::tasks::batch_dice(&pred, &y, self.net.config().num_classes)?.mean,
            });
        }
        let summary = summarize(self.epoch, &rows, None);
        self.rows.extend(rows);
        self.history.push(summary.clone());
        self.epoch += 1;
        Ok(summary)
    }

    pub fn run(&mut self, train: &[Sample], mut on_epoch: impl FnMut(&EpochSummary)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let s = self.run_epoch(train)?;
            on_epoch(&s);
        }
        Ok(())
    }
}

/// Argmax class map of `x` (`[N, C_in, spatial…]`).
pub fn predict(net: &Network, x: &Tensor) -> Result<LabelTensor> {
    let tape = Tape::new();
    let b = net.store().bind(&tape, |_| false);
    let logits = net.forward(&b, &tape.constant(x.clone()))?;
    Ok(nn::argmax_classes(logits.value()))
}

/// Foreground Dice per sample, averaged over `samples`.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<DiceReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let (x, _) = assemble(&[s], None);
            let pred = predict(net, &x)?;
            let pred = LabelTensor::new(s.label.shape().to_vec(), pred.data().to_vec())?;
            foreground_dice(&pred, &s.label, net.config().num_classes)
        })
        .collect::<Result<Vec<_>>>()?;
    DiceReport::average(&reports).ok_or_else(|| Error::config("dataset", "no samples to evaluate"))
}

/// Errors unless the architecture's edges connect the stem to the output.
pub fn check_connected(arch: &DerivedArchitecture) -> Result<()> {
    let geom = arch.network.geometry;
    let edges = arch.edges.iter().map(|e| e.edge()).collect();
    if reachable_from_stem(&geom, &edges).contains(&geom.output()) {
        Ok(())
    } else {
        Err(Error::Disconnected(format!("output {} is unreachable from the stem", geom.output())))
    }
}

/// Trains a freshly initialized network for `arch` on `train` and reports
/// Dice on `val`.
pub fn retrain_derived(
    arch: &DerivedArchitecture,
    train: &[Sample],
    val: &[Sample],
    config: &TrainConfig,
    init_seed: u64,
    on_epoch: impl FnMut(&EpochSummary),
) -> Result<(Trainer, DiceReport)> {
    check_connected(arch)?;
    let net = arch.instantiate(init_seed)?;
    let mut trainer = Trainer::new(net, config.clone())?;
    trainer.run(train, on_epoch)?;
    let dice = evaluate(&trainer.net, val)?;
    Ok((trainer, dice))
}
