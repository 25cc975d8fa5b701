use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::{ContextKey, GradTable, ParametricPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over sparse logit rows. Moments exist only for rows that have
/// received a gradient at least once; those rows keep being updated from
/// their momentum on later steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub(crate) t: u64,
    pub(crate) moments: BTreeMap<ContextKey, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Every row in `grads` must already be materialized
    /// in `policy`.
    pub fn step(&mut self, policy: &mut ParametricPolicy, grads: &GradTable, lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        for (key, g) in grads.iter() {
            self.moments.entry(key.clone()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        }
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (key, (m, v)) in self.moments.iter_mut() {
            let g = grads.get(key);
            let theta = policy.existing_row_mut(key).expect("rows are materialized before the update");
            for i in 0..m.len() {
                let gi = g.map_or(0.0, |r| r[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
