//! The adaptive asymmetric training loop: an expert policy refined by
//! trust-region steps through the trainee's visitation (importance-weighted
//! against the mixture behavior), coupled with a KL-projection of the
//! trainee onto the expert, in both Monte-Carlo-advantage and learned-Q
//! variants.

use crate::envpair::{rollout, ProcessPair, StepRecord, DEFAULT_WINDOW};
use crate::estimators::{
    discounted_returns, gae, importance_weights, normalize_advantages, shape_with_entropy,
    MixtureValue,
};
use crate::imitation::{
    ail_step, buffer_kl, buffer_update, mixture_sample, ExpertRef, MixtureMode, MixtureSchedule,
    ReplayBuffer, AIL_EPOCHS, EVAL_EVERY,
};
use crate::nets::{Adam, CategoricalPolicyNet, InputDomain, NetError, QNet, ValueNet};
use crate::trpo::{fit_q, fit_value, trpo_step, PolicyBatch, TrpoError, TrustRegionConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STEPS_PER_ITER: usize = 2000;
pub const A2D_ENTROPY_ALPHA: f64 = 10.0;
pub const RL_ENTROPY_ALPHA: f64 = 1.0;
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum A2dError {
    #[error(transparent)]
    Trpo(#[from] TrpoError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("advantage estimation failed: {0}")]
    Estimator(#[from] crate::estimators::EstimatorError),
}

/// Optional post-plateau generalized-advantage decay: once `window`
/// consecutive deterministic evaluations agree within `tolerance`, the
/// mixing parameter shrinks by `decay` per iteration (floored at zero).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaAnneal {
    pub decay: f64,
    pub window: usize,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct A2dConfig {
    /// Generalized-advantage mixing parameter.
    pub lambda: f64,
    /// Advantage source: false = generalized advantages on the mixture
    /// value, true = learned Q(b, a) minus the trainee value.
    pub use_q: bool,
    pub mixture_mode: MixtureMode,
    pub beta0: f64,
    pub entropy_alpha: f64,
    pub normalize: bool,
    pub trust: TrustRegionConfig,
    pub steps_per_iter: usize,
    pub eval_interactions: usize,
    /// Evaluate every this many iterations.
    pub eval_every: usize,
    pub lambda_anneal: Option<LambdaAnneal>,
    /// Observation-window length of the trainee's belief input.
    pub window: usize,
    pub buffer_capacity: usize,
    pub value_lr: f64,
    pub q_lr: f64,
    pub ail_lr: f64,
}

impl Default for A2dConfig {
    fn default() -> Self {
        A2dConfig {
            lambda: 0.9,
            use_q: false,
            mixture_mode: MixtureMode::Multiplicative,
            beta0: 1.0,
            entropy_alpha: A2D_ENTROPY_ALPHA,
            normalize: true,
            trust: TrustRegionConfig::default(),
            steps_per_iter: STEPS_PER_ITER,
            eval_interactions: STEPS_PER_ITER,
            eval_every: EVAL_EVERY,
            lambda_anneal: None,
            window: DEFAULT_WINDOW,
            buffer_capacity: crate::imitation::BUFFER_CAPACITY,
            value_lr: crate::trpo::VALUE_LR,
            q_lr: crate::trpo::Q_LR,
            ail_lr: crate::imitation::AIL_LR,
        }
    }
}

impl A2dConfig {
    /// Switches the advantage source between generalized advantages on the
    /// mixture value and the learned state-action critic.
    pub fn with_q_variant(mut self, on: bool) -> Self {
        self.use_q = on;
        if on {
            // the Q form assumes the trainee-only behavior regime
            self.mixture_mode = MixtureMode::ImmediateZero;
        }
        self
    }
}

/// Serialized in full so a run can resume bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct A2dState {
    pub expert: CategoricalPolicyNet,
    pub trainee: CategoricalPolicyNet,
    pub v_expert: ValueNet,
    pub v_trainee: ValueNet,
    pub q_net: Option<QNet>,
    pub opt_v_expert: Adam,
    pub opt_v_trainee: Adam,
    pub opt_q: Option<Adam>,
    pub opt_trainee: Adam,
    pub schedule: MixtureSchedule,
    pub buffer: ReplayBuffer,
    pub iteration: usize,
    pub env_steps_total: usize,
    pub lambda: f64,
    pub lambda_annealing: bool,
    pub q_beta_warned: bool,
    pub recent_det: Vec<f64>,
}

impl A2dState {
    pub fn new<R: Rng>(pair: &ProcessPair, cfg: &A2dConfig, rng: &mut R) -> Self {
        let bdim = crate::envpair::window_flat_len(cfg.window, pair.obs_len(), pair.n_actions);
        let expert = CategoricalPolicyNet::new(pair.state_len(), pair.n_actions, InputDomain::StateVec, rng);
        let trainee = CategoricalPolicyNet::new(bdim, pair.n_actions, InputDomain::BeliefVec, rng);
        let v_expert = ValueNet::new(pair.state_len(), rng);
        let v_trainee = ValueNet::new(bdim, rng);
        let (q_net, opt_q) = if cfg.use_q {
            let q = QNet::new(bdim, pair.n_actions, rng);
            let opt = Adam::new(q.params.n_params(), cfg.q_lr);
            (Some(q), Some(opt))
        } else {
            (None, None)
        };
        A2dState {
            opt_v_expert: Adam::new(v_expert.params.n_params(), cfg.value_lr),
            opt_v_trainee: Adam::new(v_trainee.params.n_params(), cfg.value_lr),
            opt_trainee: Adam::new(trainee.params.n_params(), cfg.ail_lr),
            expert,
            trainee,
            v_expert,
            v_trainee,
            q_net,
            opt_q,
            schedule: MixtureSchedule::new(cfg.beta0, cfg.mixture_mode),
            buffer: ReplayBuffer::with_capacity(cfg.buffer_capacity),
            iteration: 0,
            env_steps_total: 0,
            lambda: cfg.lambda,
            lambda_annealing: false,
            q_beta_warned: false,
            recent_det: Vec::new(),
        }
    }
}

/// One row of the bit-stable metrics schema; evaluation fields are absent
/// off the evaluation cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub iteration: usize,
    pub env_steps_total: usize,
    pub beta: f64,
    pub lambda: f64,
    pub stochastic_return_mean: Option<f64>,
    pub stochastic_return_std: Option<f64>,
    pub deterministic_return: Option<f64>,
    pub buffer_kl: f64,
    /// Stochastic return of the expert policy acting alone, on the
    /// evaluation cadence.
    pub expert_return_probe: Option<f64>,
    pub max_importance_weight: f64,
    pub trpo_accepted: bool,
    pub trpo_kl: f64,
    pub value_loss: f64,
    pub q_loss: Option<f64>,
}

fn column_matrix(rows: usize, columns: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, columns.len(), |r, c| columns[c][r])
}

/// One full iteration: anneal the mixture, roll out under it, refresh the
/// buffer, estimate advantages against the mixed value baseline, take the
/// trust-region expert step on the importance-weighted objective, refit the
/// critics on reward-to-go, then project the trainee onto the buffer.
pub fn a2d_iteration<R: Rng>(
    state: &mut A2dState,
    pair: &ProcessPair,
    cfg: &A2dConfig,
    rng: &mut R,
) -> Result<MetricsRecord, A2dError> {
    let beta = state.schedule.set_iteration(state.iteration);
    if cfg.use_q && beta > 0.0 && !state.q_beta_warned {
        eprintln!(
            "warning: learned-Q advantages assume trainee-only behavior, but the mixing weight is {beta}"
        );
        state.q_beta_warned = true;
    }
    if let Some(anneal) = &cfg.lambda_anneal {
        if !state.lambda_annealing
            && state.recent_det.len() >= anneal.window
            && state.recent_det[state.recent_det.len() - anneal.window..]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
                - state.recent_det[state.recent_det.len() - anneal.window..]
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min)
                <= anneal.tolerance
        {
            state.lambda_annealing = true;
        }
        if state.lambda_annealing {
            state.lambda = (state.lambda - anneal.decay).max(0.0);
        }
    }

    let window = crate::envpair::window_from_flat_len(
        state.trainee.params.input_dim(),
        pair.obs_len(),
        pair.n_actions,
    )
    .expect("trainee input length matches some belief window");
    let episodes = {
        let expert = &state.expert;
        let trainee = &state.trainee;
        rollout(pair, cfg.steps_per_iter, window, rng, |s, bw, r| {
            let pe = expert.forward(pair.state_vec(s)).expect("state vectors are finite").probs;
            let pt = trainee.forward(&bw.flatten()).expect("belief vectors are finite").probs;
            mixture_sample(beta, &pe, &pt, r)
        })
    };
    state.env_steps_total += cfg.steps_per_iter;
    let steps: Vec<StepRecord> = episodes.into_iter().flat_map(|e| e.steps).collect();
    let n = steps.len();

    buffer_update(
        &mut state.buffer,
        pair,
        steps.iter(),
        &ExpertRef::Net(&state.expert),
    );

    let s_vecs: Vec<Vec<f64>> = steps.iter().map(|t| pair.state_vec(t.s).to_vec()).collect();
    let s_next_vecs: Vec<Vec<f64>> = steps.iter().map(|t| pair.state_vec(t.s_next).to_vec()).collect();
    let b_vecs: Vec<Vec<f64>> = steps.iter().map(|t| t.b.clone()).collect();
    let b_next_vecs: Vec<Vec<f64>> = steps.iter().map(|t| t.b_next.clone()).collect();
    let bdim = state.trainee.params.input_dim();
    let xs = column_matrix(pair.state_len(), &s_vecs);
    let xs_next = column_matrix(pair.state_len(), &s_next_vecs);
    let xb = column_matrix(bdim, &b_vecs);
    let xb_next = column_matrix(bdim, &b_next_vecs);

    let vm = state.v_expert.value_batch(&xs);
    let vm_next = state.v_expert.value_batch(&xs_next);
    let vp = state.v_trainee.value_batch(&xb);
    let vp_next = state.v_trainee.value_batch(&xb_next);
    let mix = |m: &DVector<f64>, p: &DVector<f64>, t: usize| {
        MixtureValue {
            beta,
            expert_value: m[t],
            trainee_value: p[t],
        }
        .value()
    };
    let v_mix: Vec<f64> = (0..n).map(|t| mix(&vm, &vp, t)).collect();
    let v_mix_next: Vec<f64> = (0..n).map(|t| mix(&vm_next, &vp_next, t)).collect();

    let vm_next_vec: Vec<f64> = vm_next.iter().copied().collect();
    let vp_next_vec: Vec<f64> = vp_next.iter().copied().collect();
    let targets_m = DVector::from_vec(discounted_returns(&steps, &vm_next_vec, pair.gamma)?);
    let targets_p = DVector::from_vec(discounted_returns(&steps, &vp_next_vec, pair.gamma)?);

    let mut advantages = if let Some(q) = &state.q_net {
        steps
            .iter()
            .enumerate()
            .map(|(t, step)| q.q_value(&step.b, step.a) - vp[t])
            .collect()
    } else {
        gae(&steps, &v_mix, &v_mix_next, pair.gamma, state.lambda)?
    };

    let (_, expert_logps_all, _) = state.expert.forward_batch(&xs);
    let expert_logps: Vec<f64> = steps
        .iter()
        .enumerate()
        .map(|(t, step)| expert_logps_all[(step.a, t)])
        .collect();
    let behavior_logps: Vec<f64> = steps.iter().map(|t| t.behavior_logp).collect();

    shape_with_entropy(&mut advantages, &expert_logps, cfg.entropy_alpha);
    if cfg.normalize {
        normalize_advantages(&mut advantages);
    }
    let weight_report = importance_weights(&expert_logps, &behavior_logps);

    let batch = PolicyBatch {
        inputs: xs.clone(),
        actions: steps.iter().map(|t| t.a).collect(),
        advantages,
        old_logps: behavior_logps,
    };
    let trpo_report = trpo_step(&mut state.expert, &batch, &cfg.trust)?;

    let trace_m = fit_value(&mut state.v_expert, &mut state.opt_v_expert, &xs, &targets_m, rng)?;
    let trace_p = fit_value(&mut state.v_trainee, &mut state.opt_v_trainee, &xb, &targets_p, rng)?;
    let value_loss = 0.5 * (trace_m.last().unwrap() + trace_p.last().unwrap());
    let q_loss = if let (Some(q), Some(opt)) = (state.q_net.as_mut(), state.opt_q.as_mut()) {
        let trace = fit_q(q, opt, &xb, &batch.actions, &targets_p, rng)?;
        Some(*trace.last().unwrap())
    } else {
        None
    };

    ail_step(&state.buffer, &mut state.trainee, &mut state.opt_trainee, AIL_EPOCHS, rng)
        .expect("buffer was just refreshed");
    let buffer_kl_now = buffer_kl(&state.buffer, &state.trainee);

    let on_cadence = (state.iteration + 1) % cfg.eval_every == 0;
    let (stoch_mean, stoch_std, det, probe) = if on_cadence {
        let ev = crate::harness::evaluate(pair, &state.trainee, cfg.eval_interactions, rng);
        let probe = crate::harness::evaluate(pair, &state.expert, cfg.eval_interactions, rng);
        state.recent_det.push(ev.deterministic_return);
        (
            ev.stochastic_mean,
            ev.stochastic_std,
            Some(ev.deterministic_return),
            probe.stochastic_mean,
        )
    } else {
        (None, None, None, None)
    };

    let record = MetricsRecord {
        schema_version: METRICS_SCHEMA_VERSION,
        iteration: state.iteration,
        env_steps_total: state.env_steps_total,
        beta,
        lambda: state.lambda,
        stochastic_return_mean: stoch_mean,
        stochastic_return_std: stoch_std,
        deterministic_return: det,
        buffer_kl: buffer_kl_now,
        expert_return_probe: probe,
        max_importance_weight: weight_report.max_weight,
        trpo_accepted: trpo_report.accepted,
        trpo_kl: trpo_report.kl,
        value_loss,
        q_loss,
    };
    state.iteration += 1;
    Ok(record)
}

#[derive(Debug)]
pub struct A2dRun {
    pub state: A2dState,
    pub metrics: Vec<MetricsRecord>,
    /// Trainee snapshot at the best deterministic evaluation.
    pub best_trainee: CategoricalPolicyNet,
    pub best_expert: CategoricalPolicyNet,
    pub best_deterministic_return: f64,
}

/// Runs `iters` iterations from scratch and returns the
/// best-deterministic-return checkpoint alongside the final state.
pub fn a2d_train<R: Rng>(
    pair: &ProcessPair,
    cfg: &A2dConfig,
    iters: usize,
    rng: &mut R,
) -> Result<A2dRun, A2dError> {
    let mut state = A2dState::new(pair, cfg, rng);
    let mut metrics = Vec::with_capacity(iters);
    let mut best_trainee = state.trainee.clone();
    let mut best_expert = state.expert.clone();
    let mut best_det = f64::NEG_INFINITY;
    for _ in 0..iters {
        let record = a2d_iteration(&mut state, pair, cfg, rng)?;
        if let Some(det) = record.deterministic_return {
            if det > best_det {
                best_det = det;
                best_trainee = state.trainee.clone();
                best_expert = state.expert.clone();
            }
        }
        metrics.push(record);
    }
    Ok(A2dRun {
        state,
        metrics,
        best_trainee,
        best_expert,
        best_deterministic_return: best_det,
    })
}
