use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use super::params::ParameterStore;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// θ ← θ·(1 − lr·λ) − lr · m̂ / (√v̂ + ε), with bias-corrected moments m̂, v̂.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored in `store`. Frozen
    /// parameters are skipped entirely.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.step += 1;
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;

        for (name, param) in store.iter_mut() {
            if param.frozen {
                continue;
            }
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                (
                    Array2::zeros(param.value.raw_dim()),
                    Array2::zeros(param.value.raw_dim()),
                )
            });
            Zip::from(&mut param.value)
                .and(&param.grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p = *p * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
                });
        }
    }
}
