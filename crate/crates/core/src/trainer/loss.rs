//! Subtrajectory-balance objective with prefix rewards, its trajectory-balance
//! special case, and the analytic gradient.
//!
//! For a trajectory with states `a_0 .. a_n` (the last one terminated), the
//! residual of the segment `i -> j` is
//!
//! ```text
//! Δ_ij = ln R(a_i) + Σ_{k=i}^{j-1} ln P(a_{k+1} | a_k) - ln R(a_j)
//! ```
//!
//! and the loss is `Σ_{i<j} λ^(j-i) Δ_ij²`. The backward policy is identically
//! one because every state has a unique parent. Rewards depend only on the
//! frozen reference, so they are constants for the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::par;
use crate::policy::{GradTable, ParametricPolicy};
use crate::reward::{check_temperature, RewardModel};
use crate::seq::{TokenId, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubTbConfig {
    /// Segment weight base, `λ^(j-i)`.
    pub lambda: f64,
    /// Use only the full-trajectory segment (trajectory balance).
    pub include_terminal_only: bool,
}

impl Default for SubTbConfig {
    fn default() -> Self {
        Self { lambda: 1.0, include_terminal_only: false }
    }
}

impl SubTbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(validation(format!("lambda {} outside (0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// Cumulative log-flows along one trajectory.
struct PathSums {
    ids: Vec<TokenId>,
    /// `log_p[k]`: Σ of the first `k` transition log-probabilities.
    log_p: Vec<f64>,
    /// `log_r[k]`: ln R(a_k).
    log_r: Vec<f64>,
}

impl PathSums {
    fn new(traj: &Trajectory, policy: &ParametricPolicy, rm: &RewardModel, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if !traj.is_complete(policy.vocab()) {
            return Err(Error::State("trajectory does not end with the terminal token".into()));
        }
        if traj.len() > policy.max_len() + 1 {
            return Err(Error::State(format!("trajectory has {} steps, cap is {}", traj.len(), policy.max_len() + 1)));
        }
        let ids: Vec<TokenId> = traj.steps.iter().map(|s| s.token).collect();
        let mut log_p = Vec::with_capacity(ids.len() + 1);
        log_p.push(0.0);
        let mut acc = 0.0;
        for k in 0..ids.len() {
            acc += policy.step_log_prob(&traj.prompt, &ids[..k], ids[k]);
            log_p.push(acc);
        }
        let log_r = rm
            .cumulative_ref_log_probs(&traj.prompt, &ids)
            .into_iter()
            .map(|l| l / temperature)
            .collect();
        Ok(Self { ids, log_p, log_r })
    }

    fn n(&self) -> usize {
        self.ids.len()
    }

    /// Grouped as a difference of per-state log-flow gaps, which is exactly
    /// zero whenever the policy and reward cumulants coincide.
    fn residual(&self, i: usize, j: usize) -> f64 {
        (self.log_p[j] - self.log_r[j]) - (self.log_p[i] - self.log_r[i])
    }

    fn loss(&self, cfg: &SubTbConfig) -> f64 {
        let n = self.n();
        if cfg.include_terminal_only {
            return self.residual(0, n).powi(2);
        }
        let mut total = 0.0;
        for i in 0..n {
            let mut w = 1.0;
            for j in i + 1..=n {
                w *= cfg.lambda;
                total += w * self.residual(i, j).powi(2);
            }
        }
        total
    }

    /// `d loss / d ln P(transition k)` for every transition.
    fn transition_weights(&self, cfg: &SubTbConfig) -> Vec<f64> {
        let n = self.n();
        let mut w = vec![0.0; n];
        if cfg.include_terminal_only {
            w.fill(2.0 * self.residual(0, n));
            return w;
        }
        // Difference array: pair (i, j) adds to transitions i..j.
        let mut diff = vec![0.0; n + 1];
        for i in 0..n {
            let mut lam = 1.0;
            for j in i + 1..=n {
                lam *= cfg.lambda;
                let g = 2.0 * lam * self.residual(i, j);
                diff[i] += g;
                diff[j] -= g;
            }
        }
        let mut run = 0.0;
        for k in 0..n {
            run += diff[k];
            w[k] = run;
        }
        w
    }
}

/// Subtrajectory-balance loss of one trajectory.
pub fn subtb_loss(
    traj: &Trajectory,
    policy: &ParametricPolicy,
    rm: &RewardModel,
    temperature: f64,
    cfg: &SubTbConfig,
) -> Result<f64> {
    cfg.validate()?;
    Ok(PathSums::new(traj, policy, rm, temperature)?.loss(cfg))
}

/// Trajectory-balance loss: the full-segment term only.
pub fn tb_loss(traj: &Trajectory, policy: &ParametricPolicy, rm: &RewardModel, temperature: f64) -> Result<f64> {
    let p = PathSums::new(traj, policy, rm, temperature)?;
    Ok(p.residual(0, p.n()).powi(2))
}

/// Batch-mean loss and its gradient with respect to the policy logits.
pub fn loss_and_gradient(
    batch: &[Trajectory],
    policy: &ParametricPolicy,
    rm: &RewardModel,
    temperature: f64,
    cfg: &SubTbConfig,
) -> Result<(f64, GradTable)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(validation("empty trajectory batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let parts = par::map_slice(batch, |traj| -> Result<(f64, GradTable)> {
        let sums = PathSums::new(traj, policy, rm, temperature)?;
        let weights = sums.transition_weights(cfg);
        let mut g = GradTable::new();
        for (k, &w) in weights.iter().enumerate() {
            policy.accumulate_grad_log_prob(&traj.prompt, &sums.ids[..k], sums.ids[k], w, &mut g);
        }
        Ok((sums.loss(cfg), g))
    });
    let mut total = 0.0;
    let mut grads = GradTable::new();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.add_scaled(&g, scale);
    }
    Ok((total * scale, grads))
}

/// Gradient of the batch-mean loss.
pub fn loss_gradient(
    batch: &[Trajectory],
    policy: &ParametricPolicy,
    rm: &RewardModel,
    temperature: f64,
    cfg: &SubTbConfig,
) -> Result<GradTable> {
    loss_and_gradient(batch, policy, rm, temperature, cfg).map(|(_, g)| g)
}
