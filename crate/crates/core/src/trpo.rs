//! Trust-region policy updates (natural gradient via conjugate gradient on
//! Fisher-vector products, with a KL-constrained backtracking line search)
//! plus the value/Q fitting routines used alongside them.

use crate::nets::{Adam, CategoricalPolicyNet, MlpCache, NetError, QNet, ValueNet};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

pub const DEFAULT_MAX_KL: f64 = 0.01;
pub const DEFAULT_CG_ITERS: usize = 10;
pub const DEFAULT_CG_DAMPING: f64 = 0.1;
pub const DEFAULT_BACKTRACK_RATIO: f64 = 0.5;
pub const DEFAULT_MAX_BACKTRACKS: usize = 10;
/// Slack allowed when checking the constraint on accepted steps.
pub const KL_CONSTRAINT_SLACK: f64 = 1e-6;
pub const VALUE_LR: f64 = 7e-4;
pub const Q_LR: f64 = 3e-4;
pub const FIT_EPOCHS: usize = 25;
pub const FIT_MINIBATCHES: usize = 32;

#[derive(Error, Debug)]
pub enum TrpoError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch arrays disagree in length")]
    LengthMismatch,
    #[error("surrogate loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrustRegionConfig {
    pub max_kl: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        TrustRegionConfig {
            max_kl: DEFAULT_MAX_KL,
            cg_iters: DEFAULT_CG_ITERS,
            cg_damping: DEFAULT_CG_DAMPING,
            backtrack_ratio: DEFAULT_BACKTRACK_RATIO,
            max_backtracks: DEFAULT_MAX_BACKTRACKS,
        }
    }
}

/// One policy-update batch: inputs are columns, one entry per step.
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub inputs: DMatrix<f64>,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    /// Log-density of each taken action under the sampling distribution
    /// (mixture behavior for adaptive runs, previous policy for plain RL).
    pub old_logps: Vec<f64>,
}

impl PolicyBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self) -> Result<(), TrpoError> {
        if self.is_empty() {
            return Err(TrpoError::EmptyBatch);
        }
        if self.inputs.ncols() != self.len()
            || self.advantages.len() != self.len()
            || self.old_logps.len() != self.len()
        {
            return Err(TrpoError::LengthMismatch);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrpoReport {
    pub accepted: bool,
    pub kl: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub backtracks: usize,
    /// Conjugate gradient hit non-positive curvature and the plain gradient
    /// direction was used instead.
    pub gradient_fallback: bool,
    pub step_norm: f64,
}

impl TrpoReport {
    fn rejected(surrogate: f64) -> Self {
        TrpoReport {
            accepted: false,
            kl: 0.0,
            surrogate_before: surrogate,
            surrogate_after: surrogate,
            backtracks: 0,
            gradient_fallback: false,
            step_norm: 0.0,
        }
    }
}

/// Importance-ratio surrogate `mean_t exp(logpi(a_t|x_t) - old_logp_t) A_t`
/// and its parameter gradient.
pub fn surrogate_loss(
    policy: &CategoricalPolicyNet,
    batch: &PolicyBatch,
) -> Result<(f64, DVector<f64>), TrpoError> {
    batch.validate()?;
    let (value, grad, _) = surrogate_with_cache(policy, batch)?;
    Ok((value, grad))
}

fn surrogate_with_cache(
    policy: &CategoricalPolicyNet,
    batch: &PolicyBatch,
) -> Result<(f64, DVector<f64>, MlpCache), TrpoError> {
    let n = batch.len();
    let (probs, logps, cache) = policy.forward_batch(&batch.inputs);
    let mut value = 0.0;
    let mut cot = DMatrix::zeros(policy.n_actions, n);
    for t in 0..n {
        let a = batch.actions[t];
        let w = (logps[(a, t)] - batch.old_logps[t]).exp();
        let coeff = w * batch.advantages[t] / n as f64;
        value += coeff;
        // d/dlogits of w*A = w*A*(one_hot(a) - probs)
        for a2 in 0..policy.n_actions {
            let indicator = if a2 == a { 1.0 } else { 0.0 };
            cot[(a2, t)] = coeff * (indicator - probs[(a2, t)]);
        }
    }
    if !value.is_finite() {
        return Err(TrpoError::NonFiniteLoss);
    }
    let grad = policy.params.backward_batch(&cache, &cot);
    Ok((value, grad, cache))
}

fn surrogate_value(policy: &CategoricalPolicyNet, batch: &PolicyBatch) -> f64 {
    let (_, logps, _) = policy.forward_batch(&batch.inputs);
    let n = batch.len();
    let mut value = 0.0;
    for t in 0..n {
        let a = batch.actions[t];
        value += (logps[(a, t)] - batch.old_logps[t]).exp() * batch.advantages[t] / n as f64;
    }
    value
}

/// Mean KL(old || new) over the batch, from a snapshot of the old
/// probabilities.
pub fn mean_kl_from_snapshot(
    old_probs: &DMatrix<f64>,
    new_policy: &CategoricalPolicyNet,
    inputs: &DMatrix<f64>,
) -> f64 {
    let (_, new_logps, _) = new_policy.forward_batch(inputs);
    let n = inputs.ncols();
    let mut total = 0.0;
    for t in 0..n {
        for a in 0..new_policy.n_actions {
            let p = old_probs[(a, t)];
            if p > 0.0 {
                total += p * (p.ln() - new_logps[(a, t)]);
            }
        }
    }
    total / n as f64
}

/// Mean KL between two live policies on shared inputs.
pub fn mean_kl(
    old_policy: &CategoricalPolicyNet,
    new_policy: &CategoricalPolicyNet,
    inputs: &DMatrix<f64>,
) -> f64 {
    let (old_probs, _, _) = old_policy.forward_batch(inputs);
    mean_kl_from_snapshot(&old_probs, new_policy, inputs)
}

/// Conjugate gradient on the damped Fisher system `(F + damping I) x = b`.
/// Returns the solution and whether non-positive curvature forced an early
/// abort.
fn conjugate_gradient<F: FnMut(&DVector<f64>) -> DVector<f64>>(
    mut avp: F,
    b: &DVector<f64>,
    iters: usize,
) -> (DVector<f64>, bool) {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = b.clone();
    let mut rr = r.dot(&r);
    for _ in 0..iters {
        if rr.sqrt() < 1e-12 {
            break;
        }
        let ap = avp(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 || !pap.is_finite() {
            return (x, true);
        }
        let alpha = rr / pap;
        x += &p * alpha;
        r -= &ap * alpha;
        let rr_new = r.dot(&r);
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    (x, false)
}

/// One trust-region update in place. The step follows the natural-gradient
/// direction scaled to the KL boundary, backtracking until the surrogate
/// improves while the constraint holds; on total failure the policy is left
/// unchanged.
pub fn trpo_step(
    policy: &mut CategoricalPolicyNet,
    batch: &PolicyBatch,
    cfg: &TrustRegionConfig,
) -> Result<TrpoReport, TrpoError> {
    assert!(cfg.max_kl > 0.0, "trust region must be positive");
    batch.validate()?;
    let (l0, grad, _) = surrogate_with_cache(policy, batch)?;
    if grad.norm() < 1e-12 {
        return Ok(TrpoReport::rejected(l0));
    }
    let (old_probs, _, _) = policy.forward_batch(&batch.inputs);

    let damping = cfg.cg_damping;
    let (mut direction, breakdown) = {
        let pol = &*policy;
        conjugate_gradient(
            |v| pol.fisher_vector_product(&batch.inputs, v) + v * damping,
            &grad,
            cfg.cg_iters,
        )
    };
    let mut gradient_fallback = false;
    if breakdown || direction.norm() < 1e-12 {
        gradient_fallback = true;
        direction = grad.clone();
    }
    let shs = {
        let fv = policy.fisher_vector_product(&batch.inputs, &direction) + &direction * damping;
        direction.dot(&fv)
    };
    if shs <= 0.0 || !shs.is_finite() {
        let mut report = TrpoReport::rejected(l0);
        report.gradient_fallback = gradient_fallback;
        return Ok(report);
    }
    let full_step = &direction * (2.0 * cfg.max_kl / shs).sqrt();

    let theta_old = policy.params.flat.clone();
    let mut scale = 1.0;
    for backtracks in 0..=cfg.max_backtracks {
        let candidate = &theta_old + &full_step * scale;
        policy.params.flat.copy_from(&candidate);
        let l_new = surrogate_value(policy, batch);
        let kl = mean_kl_from_snapshot(&old_probs, policy, &batch.inputs);
        if l_new.is_finite() && l_new > l0 && kl <= cfg.max_kl {
            return Ok(TrpoReport {
                accepted: true,
                kl,
                surrogate_before: l0,
                surrogate_after: l_new,
                backtracks,
                gradient_fallback,
                step_norm: (full_step.norm() * scale),
            });
        }
        scale *= cfg.backtrack_ratio;
    }
    policy.params.flat.copy_from(&theta_old);
    let mut report = TrpoReport::rejected(l0);
    report.backtracks = cfg.max_backtracks + 1;
    report.gradient_fallback = gradient_fallback;
    Ok(report)
}

// ---------------------------------------------------------------------------
// value and Q fitting
// ---------------------------------------------------------------------------

pub fn value_optimizer(n_params: usize) -> Adam {
    Adam::new(n_params, VALUE_LR)
}

pub fn q_optimizer(n_params: usize) -> Adam {
    Adam::new(n_params, Q_LR)
}

/// Mean-squared-error fit of a value net onto discounted reward-to-go
/// targets; 25 epochs over 32 shuffled minibatches.
pub fn fit_value<R: Rng>(
    net: &mut ValueNet,
    opt: &mut Adam,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    rng: &mut R,
) -> Result<Vec<f64>, NetError> {
    crate::nets::fit_regression(&mut net.params, opt, inputs, targets, FIT_EPOCHS, FIT_MINIBATCHES, rng)
}

/// Q fit onto reward-to-go from each (input, action) pair; the action joins
/// the input as a one-hot block. Same schedule as the value fit, lower rate.
pub fn fit_q<R: Rng>(
    net: &mut QNet,
    opt: &mut Adam,
    inputs: &DMatrix<f64>,
    actions: &[usize],
    targets: &DVector<f64>,
    rng: &mut R,
) -> Result<Vec<f64>, NetError> {
    assert_eq!(inputs.ncols(), actions.len());
    let dim = inputs.nrows() + net.n_actions;
    let joined = DMatrix::from_fn(dim, inputs.ncols(), |r, c| {
        if r < inputs.nrows() {
            inputs[(r, c)]
        } else if r - inputs.nrows() == actions[c] {
            1.0
        } else {
            0.0
        }
    });
    crate::nets::fit_regression(&mut net.params, opt, &joined, targets, FIT_EPOCHS, FIT_MINIBATCHES, rng)
}
