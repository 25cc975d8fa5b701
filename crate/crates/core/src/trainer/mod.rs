//! Training loop: on-policy rollouts, subtrajectory-balance gradients, Adam
//! under a warmup + cosine schedule, and length-collapse monitoring.

mod adam;
mod collapse;
mod loss;
mod schedule;

pub use adam::{Adam, AdamConfig};
pub use collapse::{CollapseConfig, CollapseDetector};
pub use loss::{loss_and_gradient, loss_gradient, subtb_loss, tb_loss, SubTbConfig};
pub use schedule::LrSchedule;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::par;
use crate::policy::{mix_seed, ParametricPolicy};
use crate::reward::RewardModel;
use crate::seq::{Prompt, TokenId, Trajectory, Transition};

/// Optimization settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// Probability of replacing an on-policy action by a uniform one.
    pub exploration: f64,
    pub adam: AdamConfig,
    pub lr: LrSchedule,
    pub subtb: SubTbConfig,
    pub collapse: CollapseConfig,
    /// Global-norm gradient clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(validation("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return Err(validation(format!("exploration {} outside [0, 1]", self.exploration)));
        }
        if self.total_steps < self.lr.horizon() {
            return Err(validation(format!(
                "total_steps ({}) must cover the learning-rate horizon ({})",
                self.total_steps,
                self.lr.horizon()
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(validation("grad_clip must be positive"));
            }
        }
        self.lr.validate()?;
        self.subtb.validate()
    }
}

/// One metrics record per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub temperature: f64,
    pub lr: f64,
    pub mean_len: f64,
    pub collapse: bool,
    /// Tokens generated this step, terminal steps included.
    pub tokens: u64,
}

/// Samples one trajectory. With probability `exploration` a step's action is
/// drawn uniformly instead of from the policy; recorded log-probabilities are
/// always the policy's.
pub fn rollout<R: Rng + ?Sized>(
    policy: &ParametricPolicy,
    prompt: &Prompt,
    exploration: f64,
    rng: &mut R,
) -> Trajectory {
    let vocab = *policy.vocab();
    let mut prefix: Vec<TokenId> = Vec::new();
    let mut steps = Vec::new();
    loop {
        let Some(lp) = policy.step_log_probs(prompt, &prefix) else {
            steps.push(Transition { token: vocab.terminal(), logprob: 0.0, forced: true });
            break;
        };
        let token = if exploration > 0.0 && rng.random::<f64>() < exploration {
            rng.random_range(0..vocab.alphabet() as TokenId)
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = vocab.terminal();
            for (v, l) in lp.iter().enumerate() {
                let p = l.exp();
                if p <= 0.0 {
                    continue;
                }
                acc += p;
                pick = v as TokenId;
                if u < acc {
                    break;
                }
            }
            pick
        };
        steps.push(Transition { token, logprob: lp[token as usize], forced: false });
        if token == vocab.terminal() {
            break;
        }
        prefix.push(token);
    }
    Trajectory { prompt: prompt.clone(), steps }
}

/// Training state: the policy being aligned plus everything needed to take
/// the next step deterministically.
#[derive(Debug, Clone)]
pub struct Trainer {
    plan: TrainPlan,
    policy: ParametricPolicy,
    reward: RewardModel,
    corpus: Vec<Prompt>,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
    adam: Adam,
    collapse: CollapseDetector,
}

impl Trainer {
    /// Starts from `policy` (usually a clone of the reward's reference).
    pub fn new(plan: TrainPlan, policy: ParametricPolicy, reward: RewardModel, corpus: Vec<Prompt>) -> Result<Self> {
        plan.validate()?;
        if corpus.is_empty() {
            return Err(validation("training corpus is empty"));
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[plan.seed, 0x0DE7])));
        let adam = Adam::new(plan.adam);
        let collapse = CollapseDetector::new(plan.collapse)?;
        Ok(Self { plan, policy, reward, corpus, order, cursor: 0, step: 0, adam, collapse })
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn policy(&self) -> &ParametricPolicy {
        &self.policy
    }

    pub fn into_policy(self) -> ParametricPolicy {
        self.policy
    }

    pub fn reward(&self) -> &RewardModel {
        &self.reward
    }

    pub fn corpus(&self) -> &[Prompt] {
        &self.corpus
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    pub fn collapse_detector(&self) -> &CollapseDetector {
        &self.collapse
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.plan.total_steps
    }

    pub(crate) fn restore_progress(&mut self, step: u64, cursor: usize, adam: Adam, collapse: CollapseDetector) {
        self.step = step;
        self.cursor = cursor % self.corpus.len();
        self.adam = adam;
        self.collapse = collapse;
    }

    fn next_prompts(&mut self) -> Vec<Prompt> {
        (0..self.plan.batch_size)
            .map(|_| {
                let p = self.corpus[self.order[self.cursor]].clone();
                self.cursor = (self.cursor + 1) % self.order.len();
                p
            })
            .collect()
    }

    /// Rolls out a batch, computes the loss at the scheduled temperature and
    /// applies one Adam update at the scheduled learning rate.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let temperature = self.reward.schedule().temperature_at(step);
        let lr = self.plan.lr.lr_at(step);
        let prompts = self.next_prompts();
        let seed = self.plan.seed;
        let exploration = self.plan.exploration;
        let policy = &self.policy;
        let batch: Vec<Trajectory> = par::map_range(prompts.len(), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, step, b as u64]));
            rollout(policy, &prompts[b], exploration, &mut rng)
        });

        for traj in &batch {
            let ids: Vec<TokenId> = traj.steps.iter().map(|s| s.token).collect();
            for k in 0..ids.len() {
                self.policy.materialize(&traj.prompt, &ids[..k]);
            }
        }

        let (loss, mut grads) = loss_and_gradient(&batch, &self.policy, &self.reward, temperature, &self.plan.subtb)?;
        if let Some(clip) = self.plan.grad_clip {
            let norm = grads.iter().flat_map(|(_, r)| r.iter()).map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let mut scaled = crate::policy::GradTable::new();
                scaled.add_scaled(&grads, clip / norm);
                grads = scaled;
            }
        }
        self.adam.step(&mut self.policy, &grads, lr);

        let tokens: usize = batch.iter().map(Trajectory::len).sum();
        let ordinary = tokens - batch.len();
        let mean_len = ordinary as f64 / batch.len() as f64;
        let collapse = self.collapse.observe(mean_len);
        self.step += 1;
        Ok(StepMetrics { step, loss, temperature, lr, mean_len, collapse, tokens: tokens as u64 })
    }

    /// Runs until `total_steps`, calling `on_step` after every step. Stops
    /// early if `on_step` returns false.
    pub fn run<F: FnMut(&StepMetrics) -> bool>(&mut self, mut on_step: F) -> Result<()> {
        while !self.is_done() {
            let m = self.train_step()?;
            if !on_step(&m) {
                break;
            }
        }
        Ok(())
    }
}
