//! Adam with named, serializable per-parameter state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", config.lr));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return invalid("adam betas must lie in [0, 1)");
        }
        Ok(Self {
            config,
            state: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Applies one update to every parameter that has a gradient.
    /// Returns the number of parameters updated.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<usize> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let mut updated = 0;
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let entry = match self.state.remove(name) {
                Some(e) => e,
                None => Moments {
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                    steps: 0,
                },
            };
            let steps = entry.steps + 1;
            let m = ((entry.m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((entry.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let mhat = (&m / (1.0 - beta1.powi(steps as i32)))?;
            let vhat = (&v / (1.0 - beta2.powi(steps as i32)))?;
            let delta = ((mhat / (vhat.sqrt()? + eps)?)? * lr)?;
            var.set(&(var.as_tensor() - delta)?)?;
            self.state.insert(name.clone(), Moments { m, v, steps });
            updated += 1;
        }
        Ok(updated)
    }

    pub fn steps(&self, name: &str) -> Option<u64> {
        self.state.get(name).map(|s| s.steps)
    }

    /// Moment tensors keyed `{prefix}{param}.m` / `.v`.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, s) in &self.state {
            out.push((format!("{prefix}{name}.m"), s.m.clone()));
            out.push((format!("{prefix}{name}.v"), s.v.clone()));
        }
        out
    }

    pub fn step_counts(&self) -> BTreeMap<String, u64> {
        self.state.iter().map(|(k, s)| (k.clone(), s.steps)).collect()
    }

    /// Rebuilds state from [`Adam::tensors`] output and [`Adam::step_counts`].
    pub fn restore(
        config: AdamConfig,
        prefix: &str,
        steps: &BTreeMap<String, u64>,
        tensors: &std::collections::HashMap<String, Tensor>,
    ) -> Result<Self> {
        let mut adam = Self::new(config)?;
        for (name, &count) in steps {
            let fetch = |suffix: &str| {
                let key = format!("{prefix}{name}.{suffix}");
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("missing optimizer tensor '{key}'")))
            };
            adam.state.insert(
                name.clone(),
                Moments {
                    m: fetch("m")?,
                    v: fetch("v")?,
                    steps: count,
                },
            );
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let w = Var::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap();
        let loss = (w.as_tensor() * Tensor::new(&[3.0f64, -0.1, 0.0], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }).unwrap();
        assert_eq!(adam.step(&[("w".into(), w.clone())], &grads).unwrap(), 1);
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 0.99).abs() < 1e-9);
        assert!((got[1] - -1.99).abs() < 1e-9);
        assert_eq!(got[2], 0.5);
        assert_eq!(adam.steps("w"), Some(1));
    }

    #[test]
    fn minimizes_quadratic() {
        let w = Var::new(&[3.0f64, -4.0], &Device::Cpu).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }).unwrap();
        for _ in 0..2000 {
            let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.step(&[("w".into(), w.clone())], &grads).unwrap();
        }
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!(got.iter().all(|v| v.abs() < 1e-2), "{got:?}");
    }

    #[test]
    fn parameters_without_gradients_are_untouched() {
        let a = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let b = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let grads = a.as_tensor().sum_all().unwrap().backward().unwrap();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        adam.step(&[("a".into(), a), ("b".into(), b.clone())], &grads).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0]);
        assert_eq!(adam.steps("b"), None);
    }

    #[test]
    fn restore_round_trips() {
        let w = Var::new(&[0.4f64, 0.1], &Device::Cpu).unwrap();
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        for _ in 0..3 {
            let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            adam.step(&[("w".into(), w.clone())], &grads).unwrap();
        }
        let map = adam.tensors("opt.").into_iter().collect();
        let back = Adam::restore(*adam.config(), "opt.", &adam.step_counts(), &map).unwrap();
        assert_eq!(back.steps("w"), Some(3));
        assert!(Adam::restore(*adam.config(), "other.", &adam.step_counts(), &map).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(Adam::new(AdamConfig { beta2: 1.0, ..Default::default() }).is_err());
    }
}
