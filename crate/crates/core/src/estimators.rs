//! Return and advantage estimation over collected trajectories: discounted
//! reward-to-go, generalized advantage estimation, importance weights,
//! entropy-shaped advantages, batch normalization, and mixture values.

use crate::envpair::{Done, StepRecord};
use thiserror::Error;

/// Default temporal-difference mixing for advantage estimation.
pub const DEFAULT_LAMBDA: f64 = 0.95;
/// Frozen-lake adaptive runs use a lower mixing value.
pub const FROZEN_LAKE_LAMBDA: f64 = 0.9;
/// The Q-advantage ablation runs at this mixing value.
pub const Q_ABLATION_LAMBDA: f64 = 0.5;
/// Entropy bonus coefficient for pure RL baselines.
pub const ENTROPY_COEFF_RL: f64 = 1.0;
/// Entropy bonus coefficient for adaptive imitation runs.
pub const ENTROPY_COEFF_ADAPTIVE: f64 = 10.0;
pub const NORMALIZE_EPS: f64 = 1e-8;
/// Behavior log-probs at or below this are counted as floored densities.
pub const BEHAVIOR_LOGP_FLOOR: f64 = crate::nets::LOG_PROB_FLOOR;

#[derive(Error, Debug)]
pub enum EstimatorError {
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error("per-step arrays must match the trajectory length")]
    LengthMismatch,
}

/// Per-step quantities handed to the policy updater.
#[derive(Debug, Clone)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
    pub importance_weights: Vec<f64>,
    pub behavior_logps: Vec<f64>,
}

impl AdvantageBatch {
    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.advantages.iter().all(|v| v.is_finite())
            && self.value_targets.iter().all(|v| v.is_finite())
            && self
                .importance_weights
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// beta-weighted blend of the privileged and compact value estimates.
#[derive(Debug, Clone, Copy)]
pub struct MixtureValue {
    pub beta: f64,
    pub expert_value: f64,
    pub trainee_value: f64,
}

impl MixtureValue {
    pub fn value(&self) -> f64 {
        self.beta * self.expert_value + (1.0 - self.beta) * self.trainee_value
    }
}

/// Reward-to-go within each episode: `G_t = r_t + gamma G_{t+1}`. True
/// terminals stop the recursion; time-limit truncation bootstraps from the
/// caller's value estimate for the state after the final step.
pub fn discounted_returns(
    steps: &[StepRecord],
    next_values: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, EstimatorError> {
    if steps.len() != next_values.len() {
        return Err(EstimatorError::LengthMismatch);
    }
    let mut returns = vec![0.0; steps.len()];
    let mut acc = 0.0;
    for t in (0..steps.len()).rev() {
        acc = match steps[t].done {
            Done::Terminal => steps[t].r,
            Done::Truncated => steps[t].r + gamma * next_values[t],
            Done::No => steps[t].r + gamma * acc,
        };
        returns[t] = acc;
    }
    Ok(returns)
}

/// Generalized advantage estimation: `A_t = sum_k (gamma lambda)^k d_{t+k}`
/// inside each episode, with `d_t = r_t + gamma V(next) - V(t)`. Terminal
/// continuations are zero; truncated ones bootstrap from `next_values`.
pub fn gae(
    steps: &[StepRecord],
    values: &[f64],
    next_values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>, EstimatorError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(EstimatorError::LambdaOutOfRange(lambda));
    }
    if steps.len() != values.len() || steps.len() != next_values.len() {
        return Err(EstimatorError::LengthMismatch);
    }
    let mut adv = vec![0.0; steps.len()];
    let mut acc = 0.0;
    for t in (0..steps.len()).rev() {
        let v_next = match steps[t].done {
            Done::Terminal => 0.0,
            _ => next_values[t],
        };
        let delta = steps[t].r + gamma * v_next - values[t];
        acc = match steps[t].done {
            Done::No => delta + gamma * lambda * acc,
            _ => delta,
        };
        adv[t] = acc;
    }
    Ok(adv)
}

#[derive(Debug, Clone)]
pub struct ImportanceReport {
    pub weights: Vec<f64>,
    pub max_weight: f64,
    /// Steps whose recorded behavior density sat at the numerical floor;
    /// their ratios are untrustworthy and worth surfacing.
    pub floored_behavior_steps: usize,
}

/// Per-step ratios `exp(target_logp - behavior_logp)`. Uncapped; the
/// maximum is reported so runs can monitor variance.
pub fn importance_weights(target_logps: &[f64], behavior_logps: &[f64]) -> ImportanceReport {
    assert_eq!(target_logps.len(), behavior_logps.len());
    let mut weights = Vec::with_capacity(target_logps.len());
    let mut max_weight: f64 = 0.0;
    let mut floored = 0;
    for (t, b) in target_logps.iter().zip(behavior_logps) {
        if *b <= BEHAVIOR_LOGP_FLOOR {
            floored += 1;
        }
        let w = (t - b).exp();
        max_weight = max_weight.max(w);
        weights.push(w);
    }
    ImportanceReport {
        weights,
        max_weight,
        floored_behavior_steps: floored,
    }
}

/// Adds `alpha * (-log pi(a_t|x_t))` to each advantage, where the log-probs
/// come from the policy being updated. The log-prob floor keeps the bonus
/// finite.
pub fn shape_with_entropy(advantages: &mut [f64], policy_logps: &[f64], alpha: f64) {
    assert_eq!(advantages.len(), policy_logps.len());
    for (a, lp) in advantages.iter_mut().zip(policy_logps) {
        *a += alpha * (-lp);
    }
}

/// Standardizes advantages in place to zero mean and unit deviation.
/// Batches smaller than two pass through unchanged; the return value says
/// whether normalization ran.
pub fn normalize_advantages(advantages: &mut [f64]) -> bool {
    if advantages.len() < 2 {
        return false;
    }
    let n = advantages.len() as f64;
    let mean: f64 = advantages.iter().sum::<f64>() / n;
    let var: f64 = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in advantages.iter_mut() {
        *a = (*a - mean) / (std + NORMALIZE_EPS);
    }
    true
}
