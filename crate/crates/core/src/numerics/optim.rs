use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::{NumericsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    /// Learning-rate grid used for model selection.
    pub const LEARNING_RATE_GRID: [f64; 4] = [1e-3, 2e-3, 5e-3, 1e-2];

    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(NumericsError::Contract("AdamW betas must lie in (0, 1)".into()));
        }
        if self.learning_rate <= 0.0 || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(NumericsError::Contract(
                "AdamW needs lr > 0, eps > 0, weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter for which `frozen` is false.
    pub fn step(&mut self, store: &mut ParamStore<f32>, frozen: impl Fn(&str) -> bool) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in store.iter_mut() {
            if frozen(&p.id) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(p.id.clone())
                .or_insert_with(|| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] as f64;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut x = *w as f64;
                x -= c.learning_rate * c.weight_decay * x;
                x -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                *w = x as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn single(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn decay_only_step() {
        let mut store = single(2.0);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.step(&mut store, |_| false);
        let expected = (2.0f64 * (1.0 - 1e-5)) as f32;
        assert_eq!(store.value("w").unwrap().data()[0], expected);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut store = single(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        for _ in 0..10 {
            opt.step(&mut store, |_| false);
        }
        assert_eq!(store.value("w").unwrap().data()[0], 2.0);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        // Simulated long run: with a constant gradient the bias-corrected ratio
        // m̂/sqrt(v̂) is exactly 1, so every step moves by lr·sign(g).
        let lr = 1e-3;
        let mut store = single(0.0);
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        })
        .unwrap();
        let mut last = 0.0f64;
        let mut step = 0.0;
        for _ in 0..2000 {
            store.iter_mut().next().unwrap().grad = Tensor::scalar(-0.37);
            opt.step(&mut store, |_| false);
            let now = store.value("w").unwrap().data()[0] as f64;
            step = now - last;
            last = now;
        }
        assert!((step - lr).abs() < 1e-6, "step {step}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = single(1.0);
        store.iter_mut().next().unwrap().grad = Tensor::scalar(5.0);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.step(&mut store, |name| name == "w");
        assert_eq!(store.value("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn invalid_betas_rejected() {
        assert!(AdamW::new(AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        })
        .is_err());
    }
}
