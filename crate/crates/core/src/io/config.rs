//! Run configuration.
//!
//! A config file is a single JSON object. It names a preset (`lro1500` by
//! default, or `lro2500`); the user's keys are merged over the preset, and
//! the result must deserialize with no unknown keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::eval::{SyntheticTask, DEFAULT_BUDGET};
use crate::policy::{Backend, Conditioning, ParametricPolicy, ReferenceModel, RowInit};
use crate::reward::{RewardModel, TemperatureSchedule};
use crate::sampling::SamplerConfig;
use crate::seq::Vocabulary;
use crate::trainer::{AdamConfig, CollapseConfig, LrSchedule, SubTbConfig, TrainPlan};

/// How the frozen reference is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReferenceConfig {
    /// I.i.d. normal logits per context.
    Gaussian { seed: u64, sigma: f64 },
    /// Copies the aligned prompt token with mean noise `eps`.
    NoisyCopy { eps: f64, spread: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureConfig {
    pub t_start: f64,
    pub t_min: f64,
    pub decay_steps: u64,
    /// When false the run trains at `t_min` throughout.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    /// Peak rate before toy-scale multiplication.
    pub base_lr_max: f64,
    pub lr_multiplier: f64,
    pub warmup_steps: u64,
    pub total_lro_steps: u64,
    /// `lr_end = lr_max * lr_end_ratio`.
    pub lr_end_ratio: f64,
    /// When false the run uses a constant `lr_max`.
    pub annealing: bool,
}

impl LrConfig {
    pub fn lr_max(&self) -> f64 {
        self.base_lr_max * self.lr_multiplier
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub exploration: f64,
    pub adam: AdamConfig,
    pub grad_clip: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub vocab_size: u32,
    pub max_len: usize,
    pub backend: Backend,
    pub conditioning: Conditioning,
    pub seed: u64,
    pub reference: ReferenceConfig,
    pub temperature: TemperatureConfig,
    pub lr: LrConfig,
    pub train: TrainConfig,
    pub subtb: SubTbConfig,
    pub sampler: SamplerConfig,
    pub collapse: CollapseConfig,
    pub enumeration_budget: u64,
    /// Record wall time and throughput in metrics (makes them run-dependent).
    pub log_timing: bool,
    /// Stop training when the collapse detector fires.
    pub halt_on_collapse: bool,
    pub paths: PathsConfig,
}

/// Ablation switches for the `ablate` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Trajectory balance instead of subtrajectory balance.
    Tb,
    /// No reward-temperature decay: train at the minimum temperature.
    NoRtd,
    /// No learning-rate warmup/annealing: constant peak rate.
    NoLro,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tb" => Ok(Ablation::Tb),
            "no-rtd" => Ok(Ablation::NoRtd),
            "no-lro" => Ok(Ablation::NoLro),
            _ => Err(Error::Config(format!("unknown ablation mode {s:?}"))),
        }
    }
}

pub const PRESETS: [&str; 2] = ["lro1500", "lro2500"];

fn preset_value(name: &str) -> Result<Value> {
    let lro: u64 = match name {
        "lro1500" => 1500,
        "lro2500" => 2500,
        _ => return Err(Error::Config(format!("unknown preset {name:?} (expected one of {PRESETS:?})"))),
    };
    Ok(json!({
        "preset": name,
        "vocab_size": 4,
        "max_len": 5,
        "backend": { "kind": "tabular" },
        "conditioning": "prompt-id",
        "seed": 0,
        "reference": { "kind": "gaussian", "seed": 0, "sigma": 1.0 },
        "temperature": { "t_start": 1.0, "t_min": 0.825, "decay_steps": lro, "decay": true },
        "lr": {
            "base_lr_max": 1e-5,
            "lr_multiplier": 100.0,
            "warmup_steps": 20,
            "total_lro_steps": lro,
            "lr_end_ratio": 0.01,
            "annealing": true
        },
        "train": {
            "batch_size": 16,
            "total_steps": 3500,
            "exploration": 0.0,
            "adam": { "beta1": 0.9, "beta2": 0.999, "eps": 1e-8 },
            "grad_clip": null
        },
        "subtb": { "lambda": 1.0, "include_terminal_only": false },
        "sampler": serde_json::to_value(SamplerConfig::default()).expect("sampler config serializes"),
        "collapse": { "window": 50, "ratio_threshold": 0.5 },
        "enumeration_budget": DEFAULT_BUDGET as u64,
        "log_timing": false,
        "halt_on_collapse": false,
        "paths": { "corpus": null, "checkpoint": null, "metrics": null }
    }))
}

/// Recursively overlays `top` on `base`. Objects carrying a `kind` tag
/// replace the base wholesale, since their fields depend on the variant.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) if !t.contains_key("kind") => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_value(preset_value(name)?).map_err(|e| Error::Config(format!("preset {name}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(user) = user else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        Self::from_overrides(user)
    }

    /// Applies a map of overrides to the named (or default) preset.
    pub fn from_overrides(user: Map<String, Value>) -> Result<Self> {
        let name = match user.get("preset") {
            None => "lro1500".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Config("preset must be a string".into())),
        };
        let mut merged = preset_value(&name)?;
        merge(&mut merged, Value::Object(user));
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Re-checks every component invariant; failures are config errors.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| match e {
            Error::Validation(m) => Error::Config(m),
            other => other,
        };
        self.vocab().map_err(wrap)?;
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if self.lr.lr_multiplier < 0.0 || self.lr.base_lr_max < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(self.lr.lr_end_ratio >= 0.0 && self.lr.lr_end_ratio <= 1.0) {
            return Err(Error::Config("lr_end_ratio must lie in [0, 1]".into()));
        }
        if self.enumeration_budget == 0 {
            return Err(Error::Config("enumeration_budget must be positive".into()));
        }
        self.temperature_schedule().validate().map_err(wrap)?;
        self.train_plan().map_err(wrap)?;
        self.sampler.validate().map_err(wrap)?;
        self.reference_policy().map_err(wrap)?;
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab_size)
    }

    pub fn budget(&self) -> u128 {
        self.enumeration_budget as u128
    }

    pub fn temperature_schedule(&self) -> TemperatureSchedule {
        let t = &self.temperature;
        if t.decay {
            TemperatureSchedule { t_start: t.t_start, t_min: t.t_min, decay_steps: t.decay_steps }
        } else {
            TemperatureSchedule::constant(t.t_min)
        }
    }

    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        let lr = &self.lr;
        let lr_max = lr.lr_max();
        if lr.annealing {
            LrSchedule::warmup_cosine(lr.warmup_steps, lr.total_lro_steps, lr_max, lr_max * lr.lr_end_ratio)
        } else {
            let s = LrSchedule::Constant { lr: lr_max };
            s.validate()?;
            Ok(s)
        }
    }

    pub fn train_plan(&self) -> Result<TrainPlan> {
        let plan = TrainPlan {
            batch_size: self.train.batch_size,
            total_steps: self.train.total_steps,
            seed: self.seed,
            exploration: self.train.exploration,
            adam: self.train.adam,
            lr: self.lr_schedule()?,
            subtb: self.subtb,
            collapse: self.collapse,
            grad_clip: self.train.grad_clip,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn reference_policy(&self) -> Result<ParametricPolicy> {
        let vocab = self.vocab()?;
        let init = match &self.reference {
            ReferenceConfig::Gaussian { seed, sigma } => RowInit::Gaussian { seed: *seed, sigma: *sigma },
            ReferenceConfig::NoisyCopy { eps, spread } => RowInit::noisy_copy(&vocab, *eps, *spread)?,
        };
        ParametricPolicy::new(vocab, self.backend, self.conditioning, self.max_len, init)
    }

    pub fn reward_model(&self) -> Result<RewardModel> {
        RewardModel::new(ReferenceModel::new(self.reference_policy()?), self.temperature_schedule())
    }

    /// Noisy-copy task matching this config's reference; fails for Gaussian
    /// references.
    pub fn noisy_copy_task(&self, n: usize, prompt_len: usize, seed: u64, id_offset: u32) -> Result<SyntheticTask> {
        match self.reference {
            ReferenceConfig::NoisyCopy { eps, spread } => {
                SyntheticTask::noisy_copy(self.vocab()?, n, prompt_len, eps, spread, seed, id_offset)
            }
            ReferenceConfig::Gaussian { .. } => Err(Error::Config("config does not use a noisy-copy reference".into())),
        }
    }

    pub fn apply_ablation(&mut self, mode: Ablation) {
        match mode {
            Ablation::Tb => self.subtb.include_terminal_only = true,
            Ablation::NoRtd => self.temperature.decay = false,
            Ablation::NoLro => self.lr.annealing = false,
        }
    }
}
