//! Sharpened internal reward `R(a_k | q) = p_ref(a_k | q)^(1/T)` and the
//! linear reward-temperature decay.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::policy::ReferenceModel;
use crate::seq::{Prompt, TokenId, TokenSequence};

/// Linear decay from `t_start` at step 0 to `t_min` at `decay_steps`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub t_start: f64,
    pub t_min: f64,
    pub decay_steps: u64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self { t_start: 1.0, t_min: 0.825, decay_steps: 1500 }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min <= self.t_start && self.t_start <= 1.0) {
            return Err(validation(format!(
                "temperature schedule needs 0 < t_min <= t_start <= 1, got t_min={} t_start={}",
                self.t_min, self.t_start
            )));
        }
        if self.decay_steps == 0 {
            return Err(validation("decay_steps must be positive"));
        }
        Ok(())
    }

    /// Constant temperature (used by the no-decay ablation).
    pub fn constant(t: f64) -> Self {
        Self { t_start: t, t_min: t, decay_steps: 1 }
    }

    pub fn temperature_at(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return self.t_min;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.t_start + (self.t_min - self.t_start) * frac
    }
}

/// Frozen reference plus temperature schedule.
#[derive(Debug, Clone)]
pub struct RewardModel {
    reference: ReferenceModel,
    schedule: TemperatureSchedule,
}

impl RewardModel {
    pub fn new(reference: ReferenceModel, schedule: TemperatureSchedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { reference, schedule })
    }

    pub fn reference(&self) -> &ReferenceModel {
        &self.reference
    }

    pub fn schedule(&self) -> &TemperatureSchedule {
        &self.schedule
    }

    /// `(1/T) Σ_i ln p_ref(a_i | a_<i, q)` over a prefix or a terminated
    /// sequence (the terminal step included). The empty prefix scores 0.
    pub fn log_reward(&self, prompt: &Prompt, seq: &TokenSequence, temperature: f64) -> Result<f64> {
        check_temperature(temperature)?;
        let r = &self.reference;
        if seq.len() > r.max_len() {
            return Err(Error::State(format!("sequence length {} exceeds cap {}", seq.len(), r.max_len())));
        }
        let toks = seq.tokens();
        let mut total: f64 = (0..toks.len()).map(|t| r.step_log_prob(prompt, &toks[..t], toks[t])).sum();
        if seq.terminated() {
            total += r.step_log_prob(prompt, toks, r.vocab().terminal());
        }
        Ok(total / temperature)
    }

    /// Cumulative reference log-probabilities along a path of raw ids
    /// (the terminal id, if present, last). Entry `k` is `ln p_ref(a_1..a_k)`.
    pub(crate) fn cumulative_ref_log_probs(&self, prompt: &Prompt, ids: &[TokenId]) -> Vec<f64> {
        let r = &self.reference;
        let mut out = Vec::with_capacity(ids.len() + 1);
        out.push(0.0);
        let mut acc = 0.0;
        for (k, &t) in ids.iter().enumerate() {
            acc += r.step_log_prob(prompt, &ids[..k], t);
            out.push(acc);
        }
        out
    }
}

pub(crate) fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(validation(format!("reward temperature {t} outside (0, 1]")));
    }
    Ok(())
}
