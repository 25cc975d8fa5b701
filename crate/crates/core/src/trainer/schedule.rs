use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Learning-rate schedule: linear warmup then cosine annealing to `lr_end`,
/// or a constant rate when annealing is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    WarmupCosine {
        warmup_steps: u64,
        total_lro_steps: u64,
        lr_max: f64,
        lr_end: f64,
    },
    Constant {
        lr: f64,
    },
}

impl LrSchedule {
    pub fn warmup_cosine(warmup_steps: u64, total_lro_steps: u64, lr_max: f64, lr_end: f64) -> Result<Self> {
        let s = LrSchedule::WarmupCosine { warmup_steps, total_lro_steps, lr_max, lr_end };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::WarmupCosine { warmup_steps, total_lro_steps, lr_max, lr_end } => {
                if warmup_steps >= total_lro_steps {
                    return Err(validation(format!(
                        "warmup_steps ({warmup_steps}) must be below total_lro_steps ({total_lro_steps})"
                    )));
                }
                if !(lr_max >= 0.0 && lr_end >= 0.0) {
                    return Err(validation("learning rates must be non-negative"));
                }
            }
            LrSchedule::Constant { lr } => {
                if !(lr >= 0.0) {
                    return Err(validation("learning rate must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Number of steps the schedule is defined over before it goes flat.
    pub fn horizon(&self) -> u64 {
        match *self {
            LrSchedule::WarmupCosine { total_lro_steps, .. } => total_lro_steps,
            LrSchedule::Constant { .. } => 0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine { warmup_steps, total_lro_steps, lr_max, lr_end } => {
                if step < warmup_steps {
                    lr_max * step as f64 / warmup_steps as f64
                } else if step <= total_lro_steps {
                    let span = (total_lro_steps - warmup_steps) as f64;
                    let progress = (step - warmup_steps) as f64 / span;
                    lr_end + 0.5 * (lr_max - lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
                } else {
                    lr_end
                }
            }
        }
    }
}
