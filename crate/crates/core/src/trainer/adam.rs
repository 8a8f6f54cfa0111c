use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `p -= lr * weight_decay * p` alongside the adaptive step.
    pub weight_decay: f64,
}

impl AdamConfig {
    /// Operation weights.
    pub fn weights() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    /// Architecture logits.
    pub fn arch() -> Self {
        Self {
            lr: 3e-3,
            weight_decay: 1e-3,
            ..Self::weights()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let bad = |name: &str, reason: &str| Err(Error::config(&format!("{field}.{name}"), reason));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        Ok(())
    }
}

/// Adam with bias correction from a global step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moments per parameter seen so far.
    pub fn moments(&self) -> impl Iterator<Item = (ParamId, &Tensor, &Tensor)> {
        self.moments.iter().map(|(&id, (m, v))| (id, m, v))
    }

    /// Restores state saved from [`Adam::moments`] and [`Adam::step_count`].
    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Tensor, Tensor)>) {
        self.step = step;
        self.moments = moments.into_iter().map(|(id, m, v)| (id, (m, v))).collect();
    }

    /// One update of every parameter in `grads`. Nothing is modified when
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
            }
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("`{}` is {:?}, gradient {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.value_mut(*id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", ParamGroup::Weight, Tensor::from_vec(vec![v]));
        (s, id)
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let (mut s, id) = scalar_store(0.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::weights()
        });
        adam.step(&mut s, &[(id, Tensor::from_vec(vec![1.0]))]).unwrap();
        assert!((s.value(id).data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn matches_scalar_recurrence() {
        let cfg = AdamConfig {
            lr: 0.05,
            beta1: 0.8,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let (mut s, id) = scalar_store(0.3);
        let mut adam = Adam::new(cfg);
        let grads = [0.5, -1.5, 0.0, 2.0];
        let (mut p, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam.step(&mut s, &[(id, Tensor::from_vec(vec![g]))]).unwrap();
            let t = t as i32 + 1;
            m = 0.8 * m + 0.2 * g;
            v = 0.95 * v + 0.05 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.95f64.powi(t));
            p -= 0.05 * (mh / (vh.sqrt() + 1e-8) + 0.01 * p);
            assert!((s.value(id).data()[0] - p).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_gradient_from_rest_keeps_parameter() {
        let (mut s, id) = scalar_store(1.25);
        let mut adam = Adam::new(AdamConfig::weights());
        adam.step(&mut s, &[(id, Tensor::from_vec(vec![0.0]))]).unwrap();
        assert_eq!(s.value(id).data()[0], 1.25);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::weights());
        let err = adam.step(&mut s, &[(id, Tensor::from_vec(vec![f64::NAN]))]).unwrap_err();
        assert!(err.to_string().contains("`p`"));
        assert_eq!(adam.step_count(), 0);
        assert_eq!(s.value(id).data()[0], 1.0);
    }
}
