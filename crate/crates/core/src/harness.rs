//! Run configuration, method dispatch, the shared evaluation protocol,
//! metrics emission, and checkpointing.

use crate::a2d::{
    a2d_iteration, A2dConfig, A2dState, LambdaAnneal, MetricsRecord, A2D_ENTROPY_ALPHA,
    METRICS_SCHEMA_VERSION, RL_ENTROPY_ALPHA, STEPS_PER_ITER,
};
use crate::envpair::{
    pair_by_name, rollout, BeliefWindow, Done, PairError, ProcessPair, DEFAULT_GAMMA,
    DEFAULT_WINDOW,
};
use crate::estimators::{
    discounted_returns, gae, importance_weights, normalize_advantages, shape_with_entropy,
};
use crate::imitation::{
    ail_iteration, AilState, ExpertSource, MixtureMode, AIL_LR, BUFFER_CAPACITY, EVAL_EVERY,
};
use crate::nets::{Adam, CategoricalPolicyNet, InputDomain, ValueNet};
use crate::oracle::{
    identifiability_report, optimal_mdp_policy, optimal_pomdp_policy, undiscounted_divergence,
    Domain, TabularPolicy,
};
use crate::trpo::{fit_value, trpo_step, PolicyBatch, TrustRegionConfig, Q_LR, VALUE_LR};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Interaction ceiling for every gridworld training run.
pub const MAX_ENV_STEPS: usize = 600_000;
pub const DEFAULT_ITERATIONS: usize = 300;
/// Stop once this many consecutive evaluations sit at the oracle optimum.
pub const EARLY_STOP_EVALS: usize = 10;
/// A deterministic return counts as "at the optimum" within this.
pub const OPTIMUM_MATCH_TOL: f64 = 1e-6;
pub const CHECKPOINT_VERSION: u32 = 1;
/// Environment variable naming the root directory for run artifacts.
pub const OUTPUT_ROOT_ENV: &str = "A2D_LAB_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
/// Interactions sampled per stochastic evaluation.
pub const EVAL_INTERACTIONS: usize = 2000;
/// Post-plateau mixing-parameter decay used when annealing is switched on.
pub const ANNEAL_DECAY: f64 = 0.05;
pub const ANNEAL_WINDOW: usize = 3;
pub const ANNEAL_TOL: f64 = 1e-9;
/// Mixing-parameter grid of the sweep subcommand.
pub const LAMBDA_SWEEP: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Train(#[from] crate::a2d::A2dError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RlMdp,
    RlPomdp,
    RlAsym,
    Ail,
    A2d,
    A2dQ,
    Oracle,
}

impl Method {
    pub fn is_rl(self) -> bool {
        matches!(self, Method::RlMdp | Method::RlPomdp | Method::RlAsym)
    }

    /// Methods whose primary policy reads the belief; their optimum target
    /// is the partially-observed one.
    pub fn trains_belief_policy(self) -> bool {
        matches!(
            self,
            Method::RlPomdp | Method::RlAsym | Method::Ail | Method::A2d | Method::A2dQ
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::RlMdp => "rl_mdp",
            Method::RlPomdp => "rl_pomdp",
            Method::RlAsym => "rl_asym",
            Method::Ail => "ail",
            Method::A2d => "a2d",
            Method::A2dQ => "a2d_q",
            Method::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

fn default_seed() -> u64 {
    0
}
fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_lambda() -> f64 {
    0.9
}
fn default_beta0() -> f64 {
    1.0
}
fn default_beta_schedule() -> MixtureMode {
    MixtureMode::Multiplicative
}
fn default_batch_size() -> usize {
    STEPS_PER_ITER
}
fn default_buffer_capacity() -> usize {
    BUFFER_CAPACITY
}
fn default_ail_lr() -> f64 {
    AIL_LR
}
fn default_value_lr() -> f64 {
    VALUE_LR
}
fn default_q_lr() -> f64 {
    Q_LR
}
fn default_max_kl() -> f64 {
    crate::trpo::DEFAULT_MAX_KL
}
fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}
fn default_eval_every() -> usize {
    EVAL_EVERY
}
fn default_window() -> usize {
    DEFAULT_WINDOW
}

/// Everything a run needs, JSON-loadable. Absent fields take the documented
/// defaults; unknown fields are rejected. The copy written back as
/// `config.resolved.json` has every default made explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub environment: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Generalized-advantage mixing parameter.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_beta0")]
    pub beta0: f64,
    #[serde(default = "default_beta_schedule")]
    pub beta_schedule: MixtureMode,
    /// Entropy-bonus weight; omitted = per-method default (10 for the
    /// adaptive methods, 1 for pure RL).
    #[serde(default)]
    pub entropy_alpha: Option<f64>,
    /// Environment interactions per training iteration.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_buffer_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_ail_lr")]
    pub ail_lr: f64,
    #[serde(default = "default_value_lr")]
    pub value_lr: f64,
    #[serde(default = "default_q_lr")]
    pub q_lr: f64,
    /// Trust-region radius of the policy step.
    #[serde(default = "default_max_kl")]
    pub max_kl: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Evaluate every this many iterations.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Decay the mixing parameter once evaluations plateau.
    #[serde(default)]
    pub lambda_anneal: bool,
    /// Observation-window length of belief inputs.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Artifact directory; omitted = `$A2D_LAB_OUT/<env>_<method>_s<seed>`.
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Checkpoint whose state-input policy serves as the fixed expert (ail).
    #[serde(default)]
    pub expert_checkpoint: Option<String>,
    /// Use the exact optimal fully-observed policy as the fixed expert (ail).
    #[serde(default)]
    pub oracle_expert: bool,
}

impl RunConfig {
    pub fn new(method: Method, environment: &str) -> Self {
        RunConfig {
            method,
            environment: environment.to_string(),
            seed: default_seed(),
            gamma: default_gamma(),
            lambda: default_lambda(),
            beta0: default_beta0(),
            beta_schedule: default_beta_schedule(),
            entropy_alpha: None,
            batch_size: default_batch_size(),
            buffer_capacity: default_buffer_capacity(),
            ail_lr: default_ail_lr(),
            value_lr: default_value_lr(),
            q_lr: default_q_lr(),
            max_kl: default_max_kl(),
            iterations: default_iterations(),
            eval_every: default_eval_every(),
            lambda_anneal: false,
            window: default_window(),
            output_dir: None,
            expert_checkpoint: None,
            oracle_expert: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if let Err(e) = pair_by_name(&self.environment) {
            return fail(format!("environment: {e}"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.beta0) {
            return fail(format!("beta0 must lie in [0, 1], got {}", self.beta0));
        }
        if let Some(a) = self.entropy_alpha {
            if !(a.is_finite() && a >= 0.0) {
                return fail(format!("entropy_alpha must be finite and >= 0, got {a}"));
            }
        }
        if self.batch_size == 0 || self.batch_size > MAX_ENV_STEPS {
            return fail(format!(
                "batch_size must lie in 1..={MAX_ENV_STEPS}, got {}",
                self.batch_size
            ));
        }
        if self.buffer_capacity == 0 {
            return fail("buffer_capacity must be positive".to_string());
        }
        for (name, lr) in [
            ("ail_lr", self.ail_lr),
            ("value_lr", self.value_lr),
            ("q_lr", self.q_lr),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("{name} must be finite and positive, got {lr}"));
            }
        }
        if !(self.max_kl.is_finite() && self.max_kl > 0.0) {
            return fail(format!(
                "max_kl must be finite and positive, got {}",
                self.max_kl
            ));
        }
        if self.iterations == 0 {
            return fail("iterations must be positive".to_string());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".to_string());
        }
        if self.window == 0 {
            return fail("window must be positive".to_string());
        }
        if self.method == Method::Ail && !self.oracle_expert && self.expert_checkpoint.is_none() {
            return fail(
                "method ail needs an expert: set oracle_expert=true or expert_checkpoint"
                    .to_string(),
            );
        }
        Ok(())
    }

    /// The entropy weight actually used: the explicit value, or the
    /// per-method default.
    pub fn entropy_alpha_resolved(&self) -> f64 {
        self.entropy_alpha.unwrap_or(match self.method {
            Method::A2d | Method::A2dQ => A2D_ENTROPY_ALPHA,
            Method::RlMdp | Method::RlPomdp | Method::RlAsym => RL_ENTROPY_ALPHA,
            Method::Ail | Method::Oracle => 0.0,
        })
    }

    /// Copy with every default made concrete, suitable for re-running the
    /// experiment from the artifact alone.
    pub fn resolved(&self, run_dir: &Path) -> RunConfig {
        let mut out = self.clone();
        out.entropy_alpha = Some(self.entropy_alpha_resolved());
        out.output_dir = Some(run_dir.to_string_lossy().into_owned());
        out
    }
}

/// Splits a `key=value` command-line override.
pub fn parse_override(raw: &str) -> Result<(String, String), HarnessError> {
    match raw.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(HarnessError::Config(format!(
            "override `{raw}` is not of the form key=value"
        ))),
    }
}

/// Parses a JSON config and applies `key=value` overrides on top (overrides
/// win). Override values are parsed as JSON where possible so `seed=3` is a
/// number, with bare words falling back to strings.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig, HarnessError> {
    let mut value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| HarnessError::Config(format!("config is not valid JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| HarnessError::Config("config root must be a JSON object".to_string()))?;
    for (key, raw) in overrides {
        let v = serde_json::from_str::<serde_json::Value>(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
        obj.insert(key.clone(), v);
    }
    let cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(
    path: &Path,
    overrides: &[(String, String)],
) -> Result<RunConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text, overrides)
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

/// Evaluation summary shared by every method trainer, so cross-method
/// return comparisons use an identical protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Mean undiscounted return over completed stochastic episodes; absent
    /// when no interactions were requested or no episode completed.
    pub stochastic_mean: Option<f64>,
    pub stochastic_std: Option<f64>,
    pub episodes: usize,
    /// Exact mean return of the argmax policy, enumerated over every initial
    /// configuration rather than sampled.
    pub deterministic_return: f64,
}

/// A policy under evaluation: a learned net or an exact tabular policy
/// (tabular belief rows are indexed by the single-observation belief id).
#[derive(Debug, Clone, Copy)]
pub enum PolicyRef<'a> {
    Net(&'a CategoricalPolicyNet),
    Tabular(&'a TabularPolicy),
}

impl<'a> From<&'a CategoricalPolicyNet> for PolicyRef<'a> {
    fn from(net: &'a CategoricalPolicyNet) -> Self {
        PolicyRef::Net(net)
    }
}

impl<'a> From<&'a TabularPolicy> for PolicyRef<'a> {
    fn from(tab: &'a TabularPolicy) -> Self {
        PolicyRef::Tabular(tab)
    }
}

fn policy_input(pair: &ProcessPair, policy: &CategoricalPolicyNet, s: usize, bw: &BeliefWindow) -> Vec<f64> {
    match policy.domain {
        InputDomain::StateVec => pair.state_vec(s).to_vec(),
        InputDomain::BeliefVec => bw.flatten(),
    }
}

/// Observation-window length a policy was built for, recovered from its
/// input dimension (state policies and tabular rows run under the default
/// window; the window only shapes flattened belief inputs).
fn policy_window(pair: &ProcessPair, policy: &PolicyRef) -> usize {
    match policy {
        PolicyRef::Net(net) if net.domain == InputDomain::BeliefVec => {
            crate::envpair::window_from_flat_len(
                net.params.input_dim(),
                pair.obs_len(),
                pair.n_actions,
            )
            .expect("belief-policy input length matches some window")
        }
        _ => DEFAULT_WINDOW,
    }
}

impl PolicyRef<'_> {
    fn tabular_row(tab: &TabularPolicy, pair: &ProcessPair, s: usize) -> Vec<f64> {
        match tab.domain {
            Domain::State => tab.row(s),
            Domain::Belief => tab.row(pair.belief_id(s)),
        }
    }

    fn sample_action<R: Rng>(
        &self,
        pair: &ProcessPair,
        s: usize,
        bw: &BeliefWindow,
        rng: &mut R,
    ) -> (usize, f64) {
        match self {
            PolicyRef::Net(net) => {
                let x = policy_input(pair, net, s, bw);
                net.sample(&x, rng).expect("feature vectors are finite")
            }
            PolicyRef::Tabular(tab) => {
                let row = Self::tabular_row(tab, pair, s);
                let a = crate::nets::sample_categorical(&row, rng);
                (a, row[a].max(f64::MIN_POSITIVE).ln())
            }
        }
    }

    fn argmax_action(&self, pair: &ProcessPair, s: usize, bw: &BeliefWindow) -> usize {
        match self {
            PolicyRef::Net(net) => {
                let x = policy_input(pair, net, s, bw);
                net.argmax_action(&x).expect("feature vectors are finite")
            }
            PolicyRef::Tabular(tab) => {
                let row = Self::tabular_row(tab, pair, s);
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            }
        }
    }
}

/// Stochastic half: episodes until at least `n_interactions` steps, mean and
/// sample-std of completed-episode returns (an episode cut at the
/// interaction boundary is censored and dropped; one cut by the horizon is a
/// real outcome and kept). Deterministic half: argmax actions from each
/// initial configuration in turn, weighted by the initial distribution.
pub fn evaluate<'a, R: Rng>(
    pair: &ProcessPair,
    policy: impl Into<PolicyRef<'a>>,
    n_interactions: usize,
    rng: &mut R,
) -> EvalSummary {
    let policy = policy.into();
    let mut returns: Vec<f64> = Vec::new();
    if n_interactions > 0 {
        let window = policy_window(pair, &policy);
        let episodes = rollout(pair, n_interactions, window, rng, |s, bw, r| {
            let (a, logp) = policy.sample_action(pair, s, bw, r);
            (a, logp, false)
        });
        let n_eps = episodes.len();
        for (i, ep) in episodes.iter().enumerate() {
            let last = ep.steps.last().expect("rollout episodes are nonempty");
            let batch_cut =
                i + 1 == n_eps && last.done == Done::Truncated && ep.steps.len() < pair.horizon;
            if !batch_cut {
                returns.push(ep.ret());
            }
        }
    }
    let (mean, std) = if returns.is_empty() {
        (None, None)
    } else {
        let n = returns.len() as f64;
        let m = returns.iter().sum::<f64>() / n;
        let var = if returns.len() < 2 {
            0.0
        } else {
            returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (n - 1.0)
        };
        (Some(m), Some(var.sqrt()))
    };
    EvalSummary {
        stochastic_mean: mean,
        stochastic_std: std,
        episodes: returns.len(),
        deterministic_return: deterministic_return(pair, policy),
    }
}

/// Exact argmax-policy return, enumerating initial configurations. Successor
/// selection takes the highest-probability branch, which is exact for the
/// deterministic-dynamics pairs this protocol evaluates.
pub fn deterministic_return<'a>(pair: &ProcessPair, policy: impl Into<PolicyRef<'a>>) -> f64 {
    let policy = policy.into();
    let window = policy_window(pair, &policy);
    let mut total = 0.0;
    for (s0, p0) in pair.init_support() {
        let mut s = s0;
        let mut bw = BeliefWindow::start(window, pair.n_actions, pair.obs_vec(s));
        let mut ret = 0.0;
        for _ in 0..pair.horizon {
            let a = policy.argmax_action(pair, s, &bw);
            ret += pair.reward(s, a, s);
            let s_next = pair
                .transition_probs(s, a)
                .iter()
                .max_by(|u, v| u.1.partial_cmp(&v.1).unwrap())
                .expect("transition rows are nonempty")
                .0;
            bw = crate::envpair::belief_update(&bw, pair.obs_vec(s_next), a)
                .expect("observation lengths are fixed per pair");
            s = s_next;
            if pair.is_terminal(s) {
                break;
            }
        }
        total += p0 * ret;
    }
    total
}

// ---------------------------------------------------------------------------
// Pure-RL baselines
// ---------------------------------------------------------------------------

/// Input wiring of the three pure-RL baselines. The fully-observed variant
/// reads states everywhere; the partially-observed one reads beliefs
/// everywhere; the asymmetric one reads beliefs in the policy but grants the
/// critic the state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlState {
    pub policy: CategoricalPolicyNet,
    pub value: ValueNet,
    pub opt_value: Adam,
    /// Critic reads the state vector (asymmetric / fully observed) rather
    /// than the belief.
    pub value_on_state: bool,
    pub iteration: usize,
    pub env_steps_total: usize,
}

impl RlState {
    pub fn new<R: Rng>(
        pair: &ProcessPair,
        method: Method,
        window: usize,
        value_lr: f64,
        rng: &mut R,
    ) -> Self {
        let bdim = crate::envpair::window_flat_len(window, pair.obs_len(), pair.n_actions);
        let (policy, value_on_state) = match method {
            Method::RlMdp => (
                CategoricalPolicyNet::new(pair.state_len(), pair.n_actions, InputDomain::StateVec, rng),
                true,
            ),
            Method::RlPomdp => (
                CategoricalPolicyNet::new(bdim, pair.n_actions, InputDomain::BeliefVec, rng),
                false,
            ),
            Method::RlAsym => (
                CategoricalPolicyNet::new(bdim, pair.n_actions, InputDomain::BeliefVec, rng),
                true,
            ),
            other => panic!("{other} is not a pure-RL method"),
        };
        let value = if value_on_state {
            ValueNet::new(pair.state_len(), rng)
        } else {
            ValueNet::new(bdim, rng)
        };
        RlState {
            opt_value: Adam::new(value.params.n_params(), value_lr),
            policy,
            value,
            value_on_state,
            iteration: 0,
            env_steps_total: 0,
        }
    }
}

/// Knobs of one on-policy trust-region iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlConfig {
    pub lambda: f64,
    pub entropy_alpha: f64,
    pub normalize: bool,
    pub trust: TrustRegionConfig,
    pub steps_per_iter: usize,
    pub eval_interactions: usize,
    pub eval_every: usize,
}

fn column_matrix(rows: usize, columns: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(rows, columns.len(), |r, c| columns[c][r])
}

/// One on-policy iteration: roll out under the current policy, estimate
/// generalized advantages against the critic, take the trust-region step on
/// the policy's own samples, then refit the critic on reward-to-go.
pub fn rl_iteration<R: Rng>(
    state: &mut RlState,
    pair: &ProcessPair,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<MetricsRecord, crate::a2d::A2dError> {
    let episodes = {
        let policy = &state.policy;
        let window = policy_window(pair, &PolicyRef::Net(policy));
        rollout(pair, cfg.steps_per_iter, window, rng, |s, bw, r| {
            let x = policy_input(pair, policy, s, bw);
            let (a, logp) = policy.sample(&x, r).expect("feature vectors are finite");
            (a, logp, false)
        })
    };
    state.env_steps_total += cfg.steps_per_iter;
    let steps: Vec<crate::envpair::StepRecord> =
        episodes.into_iter().flat_map(|e| e.steps).collect();

    let policy_inputs: Vec<Vec<f64>> = match state.policy.domain {
        InputDomain::StateVec => steps.iter().map(|t| pair.state_vec(t.s).to_vec()).collect(),
        InputDomain::BeliefVec => steps.iter().map(|t| t.b.clone()).collect(),
    };
    let (value_inputs, value_inputs_next): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if state.value_on_state
    {
        (
            steps.iter().map(|t| pair.state_vec(t.s).to_vec()).collect(),
            steps.iter().map(|t| pair.state_vec(t.s_next).to_vec()).collect(),
        )
    } else {
        (
            steps.iter().map(|t| t.b.clone()).collect(),
            steps.iter().map(|t| t.b_next.clone()).collect(),
        )
    };
    let xp = column_matrix(state.policy.params.input_dim(), &policy_inputs);
    let xv = column_matrix(state.value.params.input_dim(), &value_inputs);
    let xv_next = column_matrix(state.value.params.input_dim(), &value_inputs_next);

    let v = state.value.value_batch(&xv);
    let v_next = state.value.value_batch(&xv_next);
    let v_vec: Vec<f64> = v.iter().copied().collect();
    let v_next_vec: Vec<f64> = v_next.iter().copied().collect();

    let own_logps: Vec<f64> = steps.iter().map(|t| t.behavior_logp).collect();
    let mut advantages = gae(&steps, &v_vec, &v_next_vec, pair.gamma, cfg.lambda)?;
    shape_with_entropy(&mut advantages, &own_logps, cfg.entropy_alpha);
    if cfg.normalize {
        normalize_advantages(&mut advantages);
    }
    let weight_report = importance_weights(&own_logps, &own_logps);

    let batch = PolicyBatch {
        inputs: xp,
        actions: steps.iter().map(|t| t.a).collect(),
        advantages,
        old_logps: own_logps,
    };
    let trpo_report = trpo_step(&mut state.policy, &batch, &cfg.trust)?;

    let targets = nalgebra::DVector::from_vec(discounted_returns(&steps, &v_next_vec, pair.gamma)?);
    let trace = fit_value(&mut state.value, &mut state.opt_value, &xv, &targets, rng)?;

    let on_cadence = (state.iteration + 1) % cfg.eval_every == 0;
    let (stoch_mean, stoch_std, det) = if on_cadence {
        let ev = evaluate(pair, &state.policy, cfg.eval_interactions, rng);
        (ev.stochastic_mean, ev.stochastic_std, Some(ev.deterministic_return))
    } else {
        (None, None, None)
    };

    let record = MetricsRecord {
        schema_version: METRICS_SCHEMA_VERSION,
        iteration: state.iteration,
        env_steps_total: state.env_steps_total,
        beta: 0.0,
        lambda: cfg.lambda,
        stochastic_return_mean: stoch_mean,
        stochastic_return_std: stoch_std,
        deterministic_return: det,
        buffer_kl: 0.0,
        expert_return_probe: None,
        max_importance_weight: weight_report.max_weight,
        trpo_accepted: trpo_report.accepted,
        trpo_kl: trpo_report.kl,
        value_loss: *trace.last().expect("fit returns one loss per epoch"),
        q_loss: None,
    };
    state.iteration += 1;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Exact generator position, so a resumed run continues the same stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCheckpoint {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngCheckpoint {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngCheckpoint {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Full state of whichever method a run trains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MethodState {
    A2d(Box<A2dState>),
    Rl(Box<RlState>),
    Ail {
        state: Box<AilState>,
        expert: ExpertSource,
    },
}

impl MethodState {
    /// The policy a run is ultimately judged by.
    pub fn primary_policy(&self) -> &CategoricalPolicyNet {
        match self {
            MethodState::A2d(st) => &st.trainee,
            MethodState::Rl(st) => &st.policy,
            MethodState::Ail { state, .. } => &state.trainee,
        }
    }

    pub fn iteration(&self) -> usize {
        match self {
            MethodState::A2d(st) => st.iteration,
            MethodState::Rl(st) => st.iteration,
            MethodState::Ail { state, .. } => state.iteration,
        }
    }

    pub fn env_steps_total(&self) -> usize {
        match self {
            MethodState::A2d(st) => st.env_steps_total,
            MethodState::Rl(st) => st.env_steps_total,
            MethodState::Ail { state, .. } => state.env_steps_total,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub method: Method,
    pub environment: String,
    pub iteration: usize,
    pub rng: RngCheckpoint,
    pub state: MethodState,
}

pub fn checkpoint_save(path: &Path, checkpoint: &Checkpoint) -> Result<(), HarnessError> {
    let text = serde_json::to_string(checkpoint).map_err(|e| HarnessError::Corrupt {
        path: path.to_path_buf(),
        detail: format!("serialization failed: {e}"),
    })?;
    fs::write(path, text).map_err(io_err(path))
}

/// Loads and fully validates a checkpoint; version mismatch and truncation
/// are distinct errors, and nothing is applied on failure.
pub fn checkpoint_load(path: &Path) -> Result<Checkpoint, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| HarnessError::Corrupt {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    let found = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| HarnessError::Corrupt {
            path: path.to_path_buf(),
            detail: "missing version field".to_string(),
        })?;
    if found != CHECKPOINT_VERSION as u64 {
        return Err(HarnessError::Version {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| HarnessError::Corrupt {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Metrics files
// ---------------------------------------------------------------------------

/// Append-only JSONL writer; the single owner of its file.
#[derive(Debug)]
pub struct MetricsWriter {
    file: fs::File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<(), HarnessError> {
        let line = serde_json::to_string(record).map_err(|e| HarnessError::Corrupt {
            path: self.path.clone(),
            detail: format!("serialization failed: {e}"),
        })?;
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.write_all(b"\n"))
            .and_then(|_| self.file.flush())
            .map_err(io_err(&self.path))
    }
}

/// Reads a JSONL metrics file back, validating every row against the record
/// schema and its stamped version.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord =
            serde_json::from_str(line).map_err(|e| HarnessError::Corrupt {
                path: path.to_path_buf(),
                detail: format!("line {}: {e}", lineno + 1),
            })?;
        if record.schema_version != METRICS_SCHEMA_VERSION {
            return Err(HarnessError::Corrupt {
                path: path.to_path_buf(),
                detail: format!(
                    "line {}: schema version {} (expected {})",
                    lineno + 1,
                    record.schema_version,
                    METRICS_SCHEMA_VERSION
                ),
            });
        }
        out.push(record);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Oracle report
// ---------------------------------------------------------------------------

/// Exact per-environment reference values, emitted by the oracle method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub environment: String,
    pub n_states: usize,
    pub n_beliefs: usize,
    pub n_actions: usize,
    /// Optimal fully-observed undiscounted return.
    pub mdp_opt: f64,
    pub mdp_opt_discounted: f64,
    /// Optimal partially-observed undiscounted return; absent when the
    /// derived belief model fails its exactness check.
    pub pomdp_opt: Option<f64>,
    pub pomdp_opt_discounted: Option<f64>,
    pub pomdp_model_error: Option<String>,
    /// Whether imitating the optimal fully-observed expert recovers it.
    pub identifiable: bool,
    /// Discounted-visitation divergence at the imitation fixed point.
    pub ail_divergence: f64,
    /// Undiscounted return of the imitation fixed-point policy.
    pub ail_fixed_point_return: f64,
    /// Deterministic-protocol (argmax) return of the same fixed-point
    /// policy. Differs from the stochastic return when the fixed point
    /// itself is mixed, as on frozen_lake.
    pub ail_fixed_point_det_return: f64,
    /// Per-decision expert-vs-fixed-point divergence under the fixed-point
    /// policy's own visitation; the success threshold for buffer KL.
    pub fixed_point_step_kl: f64,
    /// Undiscounted return of the expert being imitated.
    pub expert_return: f64,
}

pub fn oracle_report(pair: &ProcessPair) -> OracleReport {
    let mdp = optimal_mdp_policy(pair);
    let (pomdp_opt, pomdp_disc, pomdp_err) = match optimal_pomdp_policy(pair) {
        Ok(sol) => (Some(sol.undisc_return), Some(sol.disc_return), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    let ident = identifiability_report(pair, &mdp.policy);
    let step_kl = undiscounted_divergence(pair, &mdp.policy, &ident.fixed_point.trainee);
    OracleReport {
        environment: pair.name.clone(),
        n_states: pair.n_states,
        n_beliefs: pair.n_beliefs,
        n_actions: pair.n_actions,
        mdp_opt: mdp.undisc_return,
        mdp_opt_discounted: mdp.disc_return,
        pomdp_opt,
        pomdp_opt_discounted: pomdp_disc,
        pomdp_model_error: pomdp_err,
        identifiable: ident.identifiable,
        ail_divergence: ident.divergence,
        ail_fixed_point_return: ident.trainee_return,
        ail_fixed_point_det_return: deterministic_return(pair, &ident.fixed_point.trainee),
        fixed_point_step_kl: step_kl,
        expert_return: ident.expert_return,
    }
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub records: Vec<MetricsRecord>,
    pub oracle: Option<OracleReport>,
    pub checkpoint_path: Option<PathBuf>,
    /// Oracle optimum the run was judged against, when one exists.
    pub optimum_target: Option<f64>,
    pub early_stopped: bool,
    /// Interactions consumed when the deterministic return first hit the
    /// optimum.
    pub steps_to_optimum: Option<usize>,
}

/// Output directory of a run: the configured one, else
/// `$A2D_LAB_OUT` (default `runs`) / `{environment}_{method}_s{seed}`.
pub fn resolve_run_dir(cfg: &RunConfig) -> PathBuf {
    match &cfg.output_dir {
        Some(dir) => PathBuf::from(dir),
        None => {
            let root =
                std::env::var(OUTPUT_ROOT_ENV).unwrap_or_else(|_| DEFAULT_OUTPUT_ROOT.to_string());
            Path::new(&root).join(format!("{}_{}_s{}", cfg.environment, cfg.method, cfg.seed))
        }
    }
}

fn a2d_config(cfg: &RunConfig) -> A2dConfig {
    let use_q = cfg.method == Method::A2dQ;
    A2dConfig {
        lambda: cfg.lambda,
        use_q,
        // the learned-Q form assumes trainee-only behavior
        mixture_mode: if use_q {
            MixtureMode::ImmediateZero
        } else {
            cfg.beta_schedule
        },
        beta0: cfg.beta0,
        entropy_alpha: cfg.entropy_alpha_resolved(),
        normalize: true,
        trust: TrustRegionConfig {
            max_kl: cfg.max_kl,
            ..TrustRegionConfig::default()
        },
        steps_per_iter: cfg.batch_size,
        eval_interactions: EVAL_INTERACTIONS,
        eval_every: cfg.eval_every,
        lambda_anneal: cfg.lambda_anneal.then_some(LambdaAnneal {
            decay: ANNEAL_DECAY,
            window: ANNEAL_WINDOW,
            tolerance: ANNEAL_TOL,
        }),
        window: cfg.window,
        buffer_capacity: cfg.buffer_capacity,
        value_lr: cfg.value_lr,
        q_lr: cfg.q_lr,
        ail_lr: cfg.ail_lr,
    }
}

fn rl_config(cfg: &RunConfig) -> RlConfig {
    RlConfig {
        lambda: cfg.lambda,
        entropy_alpha: cfg.entropy_alpha_resolved(),
        normalize: true,
        trust: TrustRegionConfig {
            max_kl: cfg.max_kl,
            ..TrustRegionConfig::default()
        },
        steps_per_iter: cfg.batch_size,
        eval_interactions: EVAL_INTERACTIONS,
        eval_every: cfg.eval_every,
    }
}

/// Extracts a state-input expert policy from a checkpoint.
fn expert_from_checkpoint(
    checkpoint: &Checkpoint,
    cfg: &RunConfig,
    pair: &ProcessPair,
) -> Result<ExpertSource, HarnessError> {
    if checkpoint.environment != cfg.environment {
        return Err(HarnessError::Config(format!(
            "expert checkpoint was trained on {}, not {}",
            checkpoint.environment, cfg.environment
        )));
    }
    let net = match &checkpoint.state {
        MethodState::A2d(st) => st.expert.clone(),
        MethodState::Rl(st) if st.policy.domain == InputDomain::StateVec => st.policy.clone(),
        _ => {
            return Err(HarnessError::Config(
                "expert checkpoint does not contain a state-input policy".to_string(),
            ))
        }
    };
    if net.params.input_dim() != pair.state_len() || net.n_actions != pair.n_actions {
        return Err(HarnessError::Config(
            "expert checkpoint shape does not match the environment".to_string(),
        ));
    }
    Ok(ExpertSource::Net(net))
}

/// Builds the initial training state a run would start from (the oracle
/// method has none).
pub fn init_state<R: Rng>(
    cfg: &RunConfig,
    pair: &ProcessPair,
    rng: &mut R,
) -> Result<MethodState, HarnessError> {
    Ok(match cfg.method {
        Method::A2d | Method::A2dQ => {
            MethodState::A2d(Box::new(A2dState::new(pair, &a2d_config(cfg), rng)))
        }
        Method::RlMdp | Method::RlPomdp | Method::RlAsym => MethodState::Rl(Box::new(
            RlState::new(pair, cfg.method, cfg.window, cfg.value_lr, rng),
        )),
        Method::Ail => {
            let expert = if cfg.oracle_expert {
                ExpertSource::Tabular(optimal_mdp_policy(pair).policy)
            } else {
                let path = cfg.expert_checkpoint.as_ref().expect("validated");
                let checkpoint = checkpoint_load(Path::new(path))?;
                expert_from_checkpoint(&checkpoint, cfg, pair)?
            };
            MethodState::Ail {
                state: Box::new(AilState::new(
                    pair,
                    cfg.window,
                    cfg.beta0,
                    cfg.buffer_capacity,
                    cfg.ail_lr,
                    rng,
                )),
                expert,
            }
        }
        Method::Oracle => {
            return Err(HarnessError::Config(
                "the oracle method has no training state".to_string(),
            ))
        }
    })
}

/// Advances whichever method the state holds by one iteration.
pub fn step_method<R: Rng>(
    state: &mut MethodState,
    pair: &ProcessPair,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<MetricsRecord, HarnessError> {
    match state {
        MethodState::A2d(st) => Ok(a2d_iteration(st, pair, &a2d_config(cfg), rng)?),
        MethodState::Rl(st) => Ok(rl_iteration(st, pair, &rl_config(cfg), rng)?),
        MethodState::Ail { state: st, expert } => {
            let metrics = ail_iteration(st, pair, &expert.as_ref(), cfg.batch_size, rng);
            let on_cadence = (metrics.iteration + 1) % cfg.eval_every == 0;
            let (stoch_mean, stoch_std, det) = if on_cadence {
                let ev = evaluate(pair, &st.trainee, EVAL_INTERACTIONS, rng);
                (ev.stochastic_mean, ev.stochastic_std, Some(ev.deterministic_return))
            } else {
                (None, None, None)
            };
            Ok(MetricsRecord {
                schema_version: METRICS_SCHEMA_VERSION,
                iteration: metrics.iteration,
                env_steps_total: st.env_steps_total,
                beta: metrics.beta,
                lambda: 0.0,
                stochastic_return_mean: stoch_mean,
                stochastic_return_std: stoch_std,
                deterministic_return: det,
                buffer_kl: metrics.buffer_kl,
                expert_return_probe: None,
                max_importance_weight: 1.0,
                trpo_accepted: false,
                trpo_kl: 0.0,
                value_loss: 0.0,
                q_loss: None,
            })
        }
    }
}

/// Oracle optimum the run's deterministic evaluations are compared to:
/// fully-observed optimum for the fully-observed method, partially-observed
/// optimum for belief-policy methods (absent when the belief model fails its
/// exactness check).
pub fn optimum_target(method: Method, pair: &ProcessPair) -> Option<f64> {
    if method == Method::RlMdp {
        Some(optimal_mdp_policy(pair).undisc_return)
    } else if method.trains_belief_policy() {
        optimal_pomdp_policy(pair).ok().map(|sol| sol.undisc_return)
    } else {
        None
    }
}

/// Runs one configured experiment to completion: artifacts are
/// `config.resolved.json`, `metrics.jsonl`, `checkpoint.json` (refreshed at
/// every evaluation point), and `oracle.json` for the oracle method. Stops
/// at the iteration budget, the interaction ceiling, or after
/// [`EARLY_STOP_EVALS`] consecutive optimal deterministic evaluations.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    run_with(cfg, |_| {})
}

/// [`run`] with a callback invoked on each record as it is appended, for
/// live progress reporting.
pub fn run_with(
    cfg: &RunConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<RunOutcome, HarnessError> {
    cfg.validate()?;
    let mut pair = pair_by_name(&cfg.environment)?;
    pair.gamma = cfg.gamma;

    let run_dir = resolve_run_dir(cfg);
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let resolved_path = run_dir.join("config.resolved.json");
    let resolved_text = serde_json::to_string_pretty(&cfg.resolved(&run_dir))
        .expect("config serialization is infallible");
    fs::write(&resolved_path, resolved_text).map_err(io_err(&resolved_path))?;

    if cfg.method == Method::Oracle {
        let report = oracle_report(&pair);
        let path = run_dir.join("oracle.json");
        let text =
            serde_json::to_string_pretty(&report).expect("report serialization is infallible");
        fs::write(&path, text).map_err(io_err(&path))?;
        return Ok(RunOutcome {
            run_dir,
            records: Vec::new(),
            oracle: Some(report),
            checkpoint_path: None,
            optimum_target: None,
            early_stopped: false,
            steps_to_optimum: None,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = init_state(cfg, &pair, &mut rng)?;
    let target = optimum_target(cfg.method, &pair);
    let metrics_path = run_dir.join("metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let checkpoint_path = run_dir.join("checkpoint.json");

    let mut records = Vec::new();
    let mut consecutive_optimal = 0usize;
    let mut early_stopped = false;
    let mut steps_to_optimum = None;
    while state.iteration() < cfg.iterations {
        if state.env_steps_total() + cfg.batch_size > MAX_ENV_STEPS {
            break;
        }
        let record = step_method(&mut state, &pair, cfg, &mut rng)?;
        writer.append(&record)?;
        on_record(&record);
        let evaluated = record.deterministic_return.is_some();
        if let (Some(det), Some(t)) = (record.deterministic_return, target) {
            if (det - t).abs() <= OPTIMUM_MATCH_TOL {
                consecutive_optimal += 1;
                steps_to_optimum.get_or_insert(record.env_steps_total);
            } else {
                consecutive_optimal = 0;
            }
            if consecutive_optimal >= EARLY_STOP_EVALS {
                early_stopped = true;
            }
        }
        records.push(record);
        if evaluated || early_stopped {
            checkpoint_save(
                &checkpoint_path,
                &Checkpoint {
                    version: CHECKPOINT_VERSION,
                    method: cfg.method,
                    environment: cfg.environment.clone(),
                    iteration: state.iteration(),
                    rng: RngCheckpoint::capture(&rng),
                    state: state.clone(),
                },
            )?;
        }
        if early_stopped {
            break;
        }
    }
    checkpoint_save(
        &checkpoint_path,
        &Checkpoint {
            version: CHECKPOINT_VERSION,
            method: cfg.method,
            environment: cfg.environment.clone(),
            iteration: state.iteration(),
            rng: RngCheckpoint::capture(&rng),
            state,
        },
    )?;

    Ok(RunOutcome {
        run_dir,
        records,
        oracle: None,
        checkpoint_path: Some(checkpoint_path),
        optimum_target: target,
        early_stopped,
        steps_to_optimum,
    })
}

// ---------------------------------------------------------------------------
// Mixing-parameter sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub reached_optimum: bool,
    pub steps_to_optimum: Option<usize>,
    pub final_buffer_kl: Option<f64>,
    pub final_deterministic_return: Option<f64>,
    pub iterations_run: usize,
}

/// Runs the full mixing-parameter grid with the base config's seed (shared
/// across grid points) and returns per-point summaries plus a rendered
/// comparison table.
pub fn sweep_lambda(base: &RunConfig) -> Result<(Vec<SweepRow>, String), HarnessError> {
    if base.method != Method::A2d {
        return Err(HarnessError::Config(format!(
            "the mixing-parameter sweep drives the a2d method, got {}",
            base.method
        )));
    }
    base.validate()?;
    let root = resolve_run_dir(base);
    let mut rows = Vec::new();
    for &lambda in LAMBDA_SWEEP.iter() {
        let mut cfg = base.clone();
        cfg.lambda = lambda;
        cfg.output_dir = Some(
            root.join(format!("lambda_{lambda:.2}"))
                .to_string_lossy()
                .into_owned(),
        );
        let outcome = run(&cfg)?;
        let final_det = outcome
            .records
            .iter()
            .rev()
            .find_map(|r| r.deterministic_return);
        rows.push(SweepRow {
            lambda,
            reached_optimum: outcome.steps_to_optimum.is_some(),
            steps_to_optimum: outcome.steps_to_optimum,
            final_buffer_kl: outcome.records.last().map(|r| r.buffer_kl),
            final_deterministic_return: final_det,
            iterations_run: outcome.records.len(),
        });
    }
    let table = render_sweep_table(&rows);
    let summary_path = root.join("sweep.json");
    let text = serde_json::to_string_pretty(&rows).expect("row serialization is infallible");
    fs::write(&summary_path, text).map_err(io_err(&summary_path))?;
    Ok((rows, table))
}

fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    out.push_str("lambda  reached  steps_to_optimum  final_buffer_kl  final_det_return\n");
    for row in rows {
        let steps = row
            .steps_to_optimum
            .map_or("-".to_string(), |s| s.to_string());
        let kl = row
            .final_buffer_kl
            .map_or("-".to_string(), |v| format!("{v:.6}"));
        let det = row
            .final_deterministic_return
            .map_or("-".to_string(), |v| format!("{v:.3}"));
        out.push_str(&format!(
            "{:<6.2}  {:<7}  {:<16}  {:<15}  {}\n",
            row.lambda, row.reached_optimum, steps, kl, det
        ));
    }
    out
}
