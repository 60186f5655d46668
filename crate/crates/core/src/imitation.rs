//! Online imitation: the beta-mixture behavior policy, the rolling replay
//! buffer of expert action distributions, and the KL-projection step that
//! fits a belief-conditioned trainee to a state-conditioned expert. Also
//! provides the standalone imitation baseline trainer.

use crate::envpair::{rollout, ProcessPair, StepRecord};
use crate::nets::{Adam, CategoricalPolicyNet, NetError};
use crate::oracle::TabularPolicy;
use nalgebra::DMatrix;
use rand::Rng;
use std::collections::VecDeque;
use thiserror::Error;

pub const BUFFER_CAPACITY: usize = 5000;
pub const ROLLOUT_STEPS_PER_ITER: usize = 2000;
pub const AIL_LR: f64 = 3e-4;
pub const AIL_BATCH: usize = 64;
pub const AIL_EPOCHS: usize = 2;
pub const BETA_DECAY: f64 = 0.8;
pub const EVAL_EVERY: usize = 5;

#[derive(Error, Debug)]
pub enum ImitationError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Expert queryable at any visited state, either a learned state-input net
/// or an exact tabular row lookup.
pub enum ExpertRef<'a> {
    Net(&'a CategoricalPolicyNet),
    Tabular(&'a TabularPolicy),
}

impl ExpertRef<'_> {
    pub fn action_probs(&self, s: usize, s_vec: &[f64]) -> Vec<f64> {
        match self {
            ExpertRef::Net(net) => net.forward(s_vec).expect("state vectors are finite").probs,
            ExpertRef::Tabular(tab) => tab.row(s),
        }
    }
}

/// Owned expert, for long-lived runs and checkpoints.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum ExpertSource {
    Net(CategoricalPolicyNet),
    Tabular(TabularPolicy),
}

impl ExpertSource {
    pub fn as_ref(&self) -> ExpertRef<'_> {
        match self {
            ExpertSource::Net(net) => ExpertRef::Net(net),
            ExpertSource::Tabular(tab) => ExpertRef::Tabular(tab),
        }
    }
}

/// One stored interaction: raw feature vectors plus the expert's full action
/// distribution at the visited state, snapshotted at insertion time.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BufferEntry {
    pub state_vec: Vec<f64>,
    pub belief_vec: Vec<f64>,
    pub expert_probs: Vec<f64>,
}

/// Rolling FIFO buffer; eviction is strictly oldest-first.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    entries: VecDeque<BufferEntry>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::with_capacity(BUFFER_CAPACITY)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayBuffer {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, entry: BufferEntry) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> &BufferEntry {
        &self.entries[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    /// beta_k = beta_0 * 0.8^k
    Multiplicative,
    /// beta_0 on the first iteration, zero afterwards
    ImmediateZero,
}

/// Non-increasing expert/trainee mixing schedule.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MixtureSchedule {
    pub beta0: f64,
    pub mode: MixtureMode,
    pub beta: f64,
}

impl MixtureSchedule {
    pub fn new(beta0: f64, mode: MixtureMode) -> Self {
        assert!((0.0..=1.0).contains(&beta0));
        MixtureSchedule {
            beta0,
            mode,
            beta: beta0,
        }
    }

    pub fn beta_for_iteration(&self, k: usize) -> f64 {
        match self.mode {
            MixtureMode::Multiplicative => self.beta0 * BETA_DECAY.powi(k as i32),
            MixtureMode::ImmediateZero => {
                if k == 0 {
                    self.beta0
                } else {
                    0.0
                }
            }
        }
    }

    /// Moves `beta` to iteration `k`'s value.
    pub fn set_iteration(&mut self, k: usize) -> f64 {
        self.beta = self.beta_for_iteration(k);
        self.beta
    }
}

/// Probability the mixture assigns to action `a`: the full density, not the
/// sampled branch.
pub fn mixture_density(beta: f64, expert_probs: &[f64], trainee_probs: &[f64], a: usize) -> f64 {
    beta * expert_probs[a] + (1.0 - beta) * trainee_probs[a]
}

/// Per-step branch selection: expert with probability `beta`, trainee
/// otherwise. The returned log-density is of the full mixture.
pub fn mixture_sample<R: Rng>(
    beta: f64,
    expert_probs: &[f64],
    trainee_probs: &[f64],
    rng: &mut R,
) -> (usize, f64, bool) {
    assert!((0.0..=1.0).contains(&beta), "mixing weight out of range");
    let expert_branch = rng.gen::<f64>() < beta;
    let source = if expert_branch { expert_probs } else { trainee_probs };
    let a = crate::nets::sample_categorical(source, rng);
    let logp = mixture_density(beta, expert_probs, trainee_probs, a).ln();
    (a, logp, expert_branch)
}

/// Appends one buffer entry per step, querying the expert at each visited
/// state and storing an owned snapshot of its distribution.
pub fn buffer_update<'a>(
    buffer: &mut ReplayBuffer,
    pair: &ProcessPair,
    steps: impl Iterator<Item = &'a StepRecord>,
    expert: &ExpertRef,
) {
    for step in steps {
        let s_vec = pair.state_vec(step.s).to_vec();
        let expert_probs = expert.action_probs(step.s, &s_vec);
        buffer.push(BufferEntry {
            state_vec: s_vec,
            belief_vec: step.b.clone(),
            expert_probs,
        });
    }
}

pub fn ail_optimizer(n_params: usize) -> Adam {
    Adam::new(n_params, AIL_LR)
}

/// One imitation update: `epochs` passes of shuffled minibatches minimizing
/// the mean KL from the stored expert rows to the trainee. The divergence
/// and its gradient are computed in closed form over all actions (the
/// logit-space gradient of each term is `trainee_probs - expert_probs`), so
/// no expert actions are ever sampled. Returns one mean divergence per epoch.
pub fn ail_step<R: Rng>(
    buffer: &ReplayBuffer,
    trainee: &mut CategoricalPolicyNet,
    opt: &mut Adam,
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<f64>, ImitationError> {
    if buffer.is_empty() {
        return Err(ImitationError::EmptyBuffer);
    }
    let n = buffer.len();
    let d = trainee.params.input_dim();
    let mut trace = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(AIL_BATCH) {
            let b = chunk.len();
            let inputs = DMatrix::from_fn(d, b, |r, c| buffer.get(chunk[c]).belief_vec[r]);
            let (probs, logps, cache) = trainee.forward_batch(&inputs);
            let mut cot = DMatrix::zeros(trainee.n_actions, b);
            let mut batch_kl = 0.0;
            for c in 0..b {
                let pe = &buffer.get(chunk[c]).expert_probs;
                for a in 0..trainee.n_actions {
                    if pe[a] > 0.0 {
                        batch_kl += pe[a] * (pe[a].ln() - logps[(a, c)]);
                    }
                    cot[(a, c)] = (probs[(a, c)] - pe[a]) / b as f64;
                }
            }
            epoch_sum += batch_kl;
            let grad = trainee.params.backward_batch(&cache, &cot);
            opt.step(&mut trainee.params.flat, &grad);
        }
        trace.push(epoch_sum / n as f64);
    }
    Ok(trace)
}

/// Mean KL from the stored expert rows to the current trainee over the whole
/// buffer: the live estimate of the imitation objective.
pub fn buffer_kl(buffer: &ReplayBuffer, trainee: &CategoricalPolicyNet) -> f64 {
    if buffer.is_empty() {
        return 0.0;
    }
    let d = trainee.params.input_dim();
    let inputs = DMatrix::from_fn(d, buffer.len(), |r, c| buffer.get(c).belief_vec[r]);
    let (_, logps, _) = trainee.forward_batch(&inputs);
    let mut total = 0.0;
    for c in 0..buffer.len() {
        let pe = &buffer.get(c).expert_probs;
        for a in 0..trainee.n_actions {
            if pe[a] > 0.0 {
                total += pe[a] * (pe[a].ln() - logps[(a, c)]);
            }
        }
    }
    total / buffer.len() as f64
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AilMetrics {
    pub iteration: usize,
    pub beta: f64,
    pub buffer_kl: f64,
    /// Mean return of completed pure-trainee episodes; populated every
    /// [`EVAL_EVERY`] iterations.
    pub eval_return: Option<f64>,
}

/// Resumable state of the standalone imitation baseline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct AilState {
    pub trainee: CategoricalPolicyNet,
    pub opt: Adam,
    pub buffer: ReplayBuffer,
    pub schedule: MixtureSchedule,
    pub iteration: usize,
    pub env_steps_total: usize,
}

impl AilState {
    pub fn new<R: Rng>(
        pair: &ProcessPair,
        window: usize,
        beta0: f64,
        buffer_capacity: usize,
        lr: f64,
        rng: &mut R,
    ) -> Self {
        let input_dim = crate::envpair::window_flat_len(window, pair.obs_len(), pair.n_actions);
        let trainee = CategoricalPolicyNet::new(
            input_dim,
            pair.n_actions,
            crate::nets::InputDomain::BeliefVec,
            rng,
        );
        let opt = Adam::new(trainee.params.n_params(), lr);
        AilState {
            trainee,
            opt,
            buffer: ReplayBuffer::with_capacity(buffer_capacity),
            schedule: MixtureSchedule::new(beta0, MixtureMode::ImmediateZero),
            iteration: 0,
            env_steps_total: 0,
        }
    }
}

/// One imitation iteration: mixture rollout against the fixed expert, buffer
/// refresh, KL-projection step. The returned record's `eval_return` is left
/// empty; evaluation cadence belongs to the caller.
pub fn ail_iteration<R: Rng>(
    state: &mut AilState,
    pair: &ProcessPair,
    expert: &ExpertRef,
    steps_per_iter: usize,
    rng: &mut R,
) -> AilMetrics {
    let beta = state.schedule.set_iteration(state.iteration);
    let window = crate::envpair::window_from_flat_len(
        state.trainee.params.input_dim(),
        pair.obs_len(),
        pair.n_actions,
    )
    .expect("trainee input length matches some belief window");
    let trainee = &state.trainee;
    let episodes = rollout(pair, steps_per_iter, window, rng, |s, bw, r| {
        let pe = expert.action_probs(s, pair.state_vec(s));
        let pt = trainee.forward(&bw.flatten()).expect("belief vectors are finite").probs;
        mixture_sample(beta, &pe, &pt, r)
    });
    state.env_steps_total += steps_per_iter;
    buffer_update(
        &mut state.buffer,
        pair,
        episodes.iter().flat_map(|ep| ep.steps.iter()),
        expert,
    );
    ail_step(&state.buffer, &mut state.trainee, &mut state.opt, AIL_EPOCHS, rng)
        .expect("buffer was just filled");
    let metrics = AilMetrics {
        iteration: state.iteration,
        beta,
        buffer_kl: buffer_kl(&state.buffer, &state.trainee),
        eval_return: None,
    };
    state.iteration += 1;
    metrics
}

/// Standalone imitation baseline: mixture rollouts against a fixed expert,
/// buffer refresh, one KL-projection step per iteration. The mixing weight
/// drops to zero after the first iteration.
pub fn ail_train<R: Rng>(
    pair: &ProcessPair,
    expert: &ExpertRef,
    iters: usize,
    rng: &mut R,
) -> (CategoricalPolicyNet, Vec<AilMetrics>) {
    let mut state = AilState::new(
        pair,
        crate::envpair::DEFAULT_WINDOW,
        1.0,
        BUFFER_CAPACITY,
        AIL_LR,
        rng,
    );
    let mut metrics = Vec::with_capacity(iters);
    for k in 0..iters {
        let mut record = ail_iteration(&mut state, pair, expert, ROLLOUT_STEPS_PER_ITER, rng);
        if (k + 1) % EVAL_EVERY == 0 || k + 1 == iters {
            record.eval_return =
                crate::harness::evaluate(pair, &state.trainee, ROLLOUT_STEPS_PER_ITER, rng)
                    .stochastic_mean;
        }
        metrics.push(record);
    }
    (state.trainee, metrics)
}
