use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseConfig {
    pub window: usize,
    pub ratio_threshold: f64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self { window: 50, ratio_threshold: 0.5 }
    }
}

/// Flags length collapse: the rolling mean of per-step mean sequence length
/// falling below `ratio_threshold` times the mean of the first `window` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseDetector {
    config: CollapseConfig,
    baseline_mean_len: Option<f64>,
    warmup: Vec<f64>,
    recent: VecDeque<f64>,
}

impl CollapseDetector {
    pub fn new(config: CollapseConfig) -> Result<Self> {
        if config.window == 0 {
            return Err(validation("collapse window must be >= 1"));
        }
        if !(config.ratio_threshold > 0.0 && config.ratio_threshold < 1.0) {
            return Err(validation(format!("collapse ratio {} outside (0, 1)", config.ratio_threshold)));
        }
        Ok(Self { config, baseline_mean_len: None, warmup: Vec::new(), recent: VecDeque::new() })
    }

    pub fn config(&self) -> &CollapseConfig {
        &self.config
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline_mean_len
    }

    /// True iff `recent_mean_len < κ · baseline`. Always false before the
    /// baseline is established.
    pub fn detect_collapse(&self, recent_mean_len: f64) -> bool {
        match self.baseline_mean_len {
            Some(b) => recent_mean_len < self.config.ratio_threshold * b,
            None => false,
        }
    }

    /// Feeds one step's mean length and reports whether collapse is flagged.
    pub fn observe(&mut self, mean_len: f64) -> bool {
        self.recent.push_back(mean_len);
        if self.recent.len() > self.config.window {
            self.recent.pop_front();
        }
        if self.baseline_mean_len.is_none() {
            self.warmup.push(mean_len);
            if self.warmup.len() == self.config.window {
                self.baseline_mean_len = Some(self.warmup.iter().sum::<f64>() / self.warmup.len() as f64);
                self.warmup.clear();
            }
            return false;
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        self.detect_collapse(mean)
    }

    pub(crate) fn state(&self) -> (Option<f64>, Vec<f64>, Vec<f64>) {
        (self.baseline_mean_len, self.warmup.clone(), self.recent.iter().copied().collect())
    }

    pub(crate) fn restore(config: CollapseConfig, baseline: Option<f64>, warmup: Vec<f64>, recent: Vec<f64>) -> Result<Self> {
        let mut d = Self::new(config)?;
        d.baseline_mean_len = baseline;
        d.warmup = warmup;
        d.recent = recent.into();
        Ok(d)
    }
}
