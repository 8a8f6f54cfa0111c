//! Alternating first-order bi-level search.

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::batch::{assemble, batches, split_indices, stream_rng};
use super::metrics::{summarize, EpochSummary, MetricsRow};
use crate::aggregation::{sparsity_penalty, Network};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{ParamGroup, ParamId};
use crate::tasks::{batch_dice, Sample};
use crate::tensor::{LabelTensor, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiLevelConfig {
    /// Fraction of the training split used for weight steps (trainA).
    pub split_fraction: f64,
    pub weight_optimizer: AdamConfig,
    pub arch_optimizer: AdamConfig,
    /// Weight of the gate sparsity penalty in the architecture loss.
    pub lambda: f64,
    pub epochs: usize,
    /// Leading epochs with weight steps only; architecture steps start after.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub arch_steps_per_weight_step: usize,
    pub seed: u64,
    pub flip_augmentation: bool,
}

impl Default for BiLevelConfig {
    fn default() -> Self {
        Self {
            split_fraction: 0.5,
            weight_optimizer: AdamConfig::weights(),
            arch_optimizer: AdamConfig::arch(),
            lambda: 1.0,
            epochs: 10,
            warmup_epochs: 0,
            batch_size: 2,
            arch_steps_per_weight_step: 1,
            seed: 0,
            flip_augmentation: true,
        }
    }
}

impl BiLevelConfig {
    pub fn validate(&self) -> Result<()> {
        self.weight_optimizer.validate("search.weight_optimizer")?;
        self.arch_optimizer.validate("search.arch_optimizer")?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config("search.split_fraction", "must lie in (0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("search.lambda", "must be non-negative and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("search.batch_size", "must be positive"));
        }
        if self.arch_steps_per_weight_step == 0 {
            return Err(Error::config("search.arch_steps_per_weight_step", "must be positive"));
        }
        Ok(())
    }
}

pub(crate) struct StepOutput {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor)>,
    pub logits: Tensor,
}

/// Loss and gradients for the parameters whose group passes `trainable`;
/// everything else is bound as a constant.
pub(crate) fn loss_and_grads(
    net: &Network,
    x: &Tensor,
    y: &LabelTensor,
    trainable: fn(ParamGroup) -> bool,
    lambda: f64,
) -> Result<StepOutput> {
    let tape = Tape::new();
    let b = net.store().bind(&tape, trainable);
    let logits = net.forward(&b, &tape.constant(x.clone()))?;
    let mut loss = nn::cross_entropy(&logits, y)?;
    if let (Some(beta), true) = (net.beta(), lambda != 0.0) {
        if trainable(ParamGroup::Beta) {
            loss = loss.add(&sparsity_penalty(b.var(beta))?.scale(lambda)?)?;
        }
    }
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss ({value})")));
    }
    let mut g = loss.backward()?;
    let grads = net
        .store()
        .ids(trainable)
        .into_iter()
        .map(|id| {
            let grad = g
                .take(b.var(id))
                .unwrap_or_else(|| Tensor::zeros(net.store().value(id).shape()));
            (id, grad)
        })
        .collect();
    Ok(StepOutput {
        loss: value,
        grads,
        logits: logits.value().clone(),
    })
}

fn is_weight(g: ParamGroup) -> bool {
    g == ParamGroup::Weight
}

fn is_arch(g: ParamGroup) -> bool {
    g.is_arch()
}

/// Search state: the supernet, both optimizers and the metric history.
#[derive(Clone, Debug)]
pub struct Searcher {
    pub net: Network,
    pub config: BiLevelConfig,
    pub weight_opt: Adam,
    pub arch_opt: Adam,
    split_a: Vec<usize>,
    split_b: Vec<usize>,
    epoch: usize,
    step: u64,
    rows: Vec<MetricsRow>,
    history: Vec<EpochSummary>,
}

impl Searcher {
    pub fn new(net: Network, config: BiLevelConfig, num_train: usize) -> Result<Self> {
        config.validate()?;
        let (split_a, split_b) = split_indices(num_train, config.split_fraction, config.seed)?;
        Ok(Self {
            net,
            weight_opt: Adam::new(config.weight_optimizer),
            arch_opt: Adam::new(config.arch_optimizer),
            config,
            split_a,
            split_b,
            epoch: 0,
            step: 0,
            rows: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn splits(&self) -> (&[usize], &[usize]) {
        (&self.split_a, &self.split_b)
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

    pub fn has_arch(&self) -> bool {
        self.net.store().iter().any(|(_, p)| p.group.is_arch())
    }

    /// Cross-entropy step on the weights with α and β bound as constants.
    /// Returns the loss and the batch Dice.
    pub fn weight_step(&mut self, x: &Tensor, y: &LabelTensor) -> Result<(f64, f64)> {
        let out = loss_and_grads(&self.net, x, y, is_weight, 0.0)?;
        self.weight_opt.step(self.net.store_mut(), &out.grads)?;
        let pred = nn::argmax_classes(&out.logits);
        let dice = batch_dice(&pred, y, self.net.config().num_classes)?.mean;
        Ok((out.loss, dice))
    }

    /// `CE + λ J` step on α and β with the weights bound as constants.
    pub fn arch_step(&mut self, x: &Tensor, y: &LabelTensor) -> Result<f64> {
        let out = loss_and_grads(&self.net, x, y, is_arch, self.config.lambda)?;
        self.arch_opt.step(self.net.store_mut(), &out.grads)?;
        Ok(out.loss)
    }

    /// One pass over trainA, each weight step followed by the configured
    /// number of architecture steps on trainB batches.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<EpochSummary> {
        let mut rng = stream_rng(self.config.seed, 1 + self.epoch as u64);
        let mut a = self.split_a.clone();
        let mut b = self.split_b.clone();
        rand::seq::SliceRandom::shuffle(&mut a[..], &mut rng);
        rand::seq::SliceRandom::shuffle(&mut b[..], &mut rng);
        let bs = self.config.batch_size;
        let (ba, bb) = (batches(&a, bs), batches(&b, bs));
        let ratio = self.config.arch_steps_per_weight_step;
        let flips = self.config.flip_augmentation;
        let has_arch = self.has_arch() && self.epoch >= self.config.warmup_epochs;
        let mut rows = Vec::with_capacity(ba.len());
        for (k, batch) in ba.iter().enumerate() {
            let picked: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let (x, y) = assemble(&picked, flips.then_some(&mut rng));
            let (loss_w, dice) = self.weight_step(&x, &y)?;
            let mut arch_losses = Vec::new();
            if has_arch {
                for t in 0..ratio {
                    let batch = &bb[(k * ratio + t) % bb.len()];
                    let picked: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
                    let (x, y) = assemble(&picked, flips.then_some(&mut rng));
                    arch_losses.push(self.arch_step(&x, &y)?);
                }
            }
            self.step += 1;
            rows.push(MetricsRow {
                step: self.step,
                epoch: self.epoch,
                loss_w,
                loss_arch: super::metrics::mean(arch_losses),
                mean_gate: self.net.mean_gate(),
                alpha_entropy: self.net.alpha_entropy(),
                dice,
            });
        }
        let summary = summarize(self.epoch, &rows, self.net.gate_separation());
        self.rows.extend(rows);
        self.history.push(summary.clone());
        self.epoch += 1;
        Ok(summary)
    }

    /// Runs the remaining configured epochs.
    pub fn run(&mut self, train: &[Sample], mut on_epoch: impl FnMut(&EpochSummary)) -> Result<()> {
        while self.epoch < self.config.epochs {
            let s = self.run_epoch(train)?;
            on_epoch(&s);
        }
        Ok(())
    }
}
