//! Trust-region update and value/Q fitting tests.

mod common;

use a2d_core::envpair::{pair_from_tables, rollout, Done};
use a2d_core::estimators::discounted_returns;
use a2d_core::nets::{
    finite_diff_grad, Activation, CategoricalPolicyNet, InputDomain, MlpParams, QNet, ValueNet,
};
use a2d_core::oracle::{belief_q, discounted_values, occupancy, state_q, Domain, TabularPolicy};
use a2d_core::trpo::{
    fit_q, fit_value, mean_kl, mean_kl_from_snapshot, q_optimizer, surrogate_loss, trpo_step,
    value_optimizer, PolicyBatch, TrustRegionConfig, TrpoError, FIT_EPOCHS, KL_CONSTRAINT_SLACK,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// KL(uniform || (0.7, 0.1, 0.1, 0.1)), frozen from an independent
/// computation: 0.25 * (ln(0.25/0.7) + 3 ln(0.25/0.1)).
const KL_FIXTURE: f64 = 0.4298131946103268;
const KL_FIXTURE_TOL: f64 = 1e-12;
const EXACT_TOL: f64 = 1e-12;
const FD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn random_net(input_dim: usize, n_actions: usize, seed: u64) -> CategoricalPolicyNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = CategoricalPolicyNet::new(input_dim, n_actions, InputDomain::BeliefVec, &mut rng);
    // perturb away from the near-uniform init so gradients are informative
    for w in net.params.flat.iter_mut() {
        *w += 0.3 * rng.gen::<f64>() - 0.15;
    }
    net
}

fn random_batch(
    net: &CategoricalPolicyNet,
    n: usize,
    seed: u64,
    own_logps: bool,
) -> PolicyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = net.params.input_dim();
    let inputs = DMatrix::from_fn(d, n, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
    let mut actions = Vec::with_capacity(n);
    let mut old_logps = Vec::with_capacity(n);
    for t in 0..n {
        let x: Vec<f64> = inputs.column(t).iter().copied().collect();
        let (a, logp) = net.sample(&x, &mut rng).unwrap();
        actions.push(a);
        old_logps.push(if own_logps {
            logp
        } else {
            logp + 0.2 * (rng.gen::<f64>() - 0.5)
        });
    }
    let advantages: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
    PolicyBatch {
        inputs,
        actions,
        advantages,
        old_logps,
    }
}

#[test]
fn surrogate_at_the_sampling_policy_is_the_mean_advantage() {
    let net = random_net(3, 4, 11);
    let batch = random_batch(&net, 40, 12, true);
    let (l, _) = surrogate_loss(&net, &batch).unwrap();
    let mean_adv = batch.advantages.iter().sum::<f64>() / batch.len() as f64;
    assert!(
        (l - mean_adv).abs() < 1e-10,
        "importance weights are all 1 at the sampling policy: {l} vs {mean_adv}"
    );
}

#[test]
fn zero_advantages_yield_zero_loss_zero_gradient_and_no_step() {
    let mut net = random_net(3, 4, 21);
    let mut batch = random_batch(&net, 30, 22, true);
    batch.advantages.iter_mut().for_each(|a| *a = 0.0);
    let (l, g) = surrogate_loss(&net, &batch).unwrap();
    assert_eq!(l, 0.0);
    assert_eq!(g.norm(), 0.0);

    let before = net.params.flat.clone();
    let report = trpo_step(&mut net, &batch, &TrustRegionConfig::default()).unwrap();
    assert!(!report.accepted);
    assert_eq!(report.step_norm, 0.0);
    assert_eq!(net.params.flat, before, "parameters must be untouched");
}

#[test]
fn surrogate_rejects_malformed_batches() {
    let net = random_net(3, 4, 31);
    let empty = PolicyBatch {
        inputs: DMatrix::zeros(3, 0),
        actions: vec![],
        advantages: vec![],
        old_logps: vec![],
    };
    assert!(matches!(
        surrogate_loss(&net, &empty),
        Err(TrpoError::EmptyBatch)
    ));

    let mut bad = random_batch(&net, 5, 32, true);
    bad.advantages.pop();
    assert!(matches!(
        surrogate_loss(&net, &bad),
        Err(TrpoError::LengthMismatch)
    ));

    let mut inf = random_batch(&net, 5, 33, true);
    inf.advantages[2] = f64::INFINITY;
    assert!(matches!(
        surrogate_loss(&net, &inf),
        Err(TrpoError::NonFiniteLoss)
    ));
}

#[test]
fn surrogate_gradient_matches_finite_differences() {
    for seed in 0..6u64 {
        let net = random_net(4, 3, 100 + seed);
        let batch = random_batch(&net, 25, 200 + seed, false);
        let (_, grad) = surrogate_loss(&net, &batch).unwrap();

        let template = net.clone();
        let mut f = |theta: &DVector<f64>| {
            let mut probe = template.clone();
            probe.params.flat.copy_from(theta);
            surrogate_loss(&probe, &batch).unwrap().0
        };
        let fd = finite_diff_grad(&mut f, &net.params.flat, FD_STEP);
        let rel = (&grad - &fd).norm() / fd.norm().max(1e-12);
        assert!(rel < FD_REL_TOL, "seed {seed}: fd mismatch rel {rel}");
    }
}

#[test]
fn mean_kl_is_zero_between_identical_policies() {
    let net = random_net(3, 4, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let inputs = DMatrix::from_fn(3, 10, |_, _| rng.gen::<f64>());
    let kl = mean_kl(&net, &net, &inputs);
    assert!(kl.abs() < EXACT_TOL, "kl against self = {kl}");
}

#[test]
fn mean_kl_reproduces_the_frozen_uniform_case() {
    // old: all-zero parameters -> exactly uniform over 4 actions.
    let old = CategoricalPolicyNet {
        params: MlpParams::zeros(2, 4, Activation::Tanh),
        domain: InputDomain::BeliefVec,
        n_actions: 4,
    };
    // new: zero net except output biases ln(0.7), ln(0.1), ln(0.1), ln(0.1).
    let mut new = old.clone();
    let n = new.params.n_params();
    let target = [0.7f64, 0.1, 0.1, 0.1];
    for (i, p) in target.iter().enumerate() {
        new.params.flat[n - 4 + i] = p.ln();
    }
    let inputs = DMatrix::from_fn(2, 3, |r, c| (r + c) as f64 * 0.1);
    let kl = mean_kl(&old, &new, &inputs);
    assert!(
        (kl - KL_FIXTURE).abs() < KL_FIXTURE_TOL,
        "kl {kl} vs fixture {KL_FIXTURE}"
    );
}

#[test]
fn mean_kl_is_nonnegative() {
    for seed in 0..20u64 {
        let a = random_net(3, 4, 300 + seed);
        let b = random_net(3, 4, 400 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let inputs = DMatrix::from_fn(3, 8, |_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let kl = mean_kl(&a, &b, &inputs);
        assert!(kl >= -1e-15, "seed {seed}: kl {kl}");
    }
}

#[test]
fn accepted_steps_respect_the_trust_region_and_improve_the_surrogate() {
    let cfg = TrustRegionConfig::default();
    let mut n_accepted = 0;
    for seed in 0..10u64 {
        let mut net = random_net(4, 3, 600 + seed);
        let batch = random_batch(&net, 60, 700 + seed, true);
        let before = net.params.flat.clone();
        let (old_probs, _, _) = net.forward_batch(&batch.inputs);
        let report = trpo_step(&mut net, &batch, &cfg).unwrap();
        if report.accepted {
            n_accepted += 1;
            assert!(
                report.kl <= cfg.max_kl + KL_CONSTRAINT_SLACK,
                "seed {seed}: accepted kl {} breaches the trust region",
                report.kl
            );
            assert!(
                report.surrogate_after > report.surrogate_before,
                "seed {seed}: accepted step must improve the surrogate"
            );
            // the reported kl is the real divergence from the pre-step policy
            let check = mean_kl_from_snapshot(&old_probs, &net, &batch.inputs);
            assert!((check - report.kl).abs() < 1e-12);
        } else {
            assert_eq!(net.params.flat, before, "seed {seed}: rejected step must restore");
        }
    }
    assert!(
        n_accepted >= 8,
        "healthy random batches should almost always step ({n_accepted}/10)"
    );
}

#[test]
fn bandit_steps_raise_the_preferred_action_monotonically() {
    // Two-armed bandit on a constant input; advantages always favor arm 0.
    let mut net = random_net(1, 2, 800);
    let cfg = TrustRegionConfig::default();
    let x = [1.0];
    let inputs = DMatrix::from_column_slice(1, 2, &[1.0, 1.0]);
    let mut last_p0 = net.forward(&x).unwrap().probs[0];
    for iter in 0..25 {
        let dist = net.forward(&x).unwrap();
        let batch = PolicyBatch {
            inputs: inputs.clone(),
            actions: vec![0, 1],
            advantages: vec![1.0, -1.0],
            old_logps: vec![dist.log_probs[0], dist.log_probs[1]],
        };
        let report = trpo_step(&mut net, &batch, &cfg).unwrap();
        let p0 = net.forward(&x).unwrap().probs[0];
        if report.accepted {
            assert!(
                p0 > last_p0,
                "iter {iter}: preferred arm fell from {last_p0} to {p0}"
            );
        }
        last_p0 = p0;
    }
    assert!(
        last_p0 > 0.9,
        "25 bounded steps should push the preferred arm past 0.9 (got {last_p0})"
    );
}

/// With sample advantages replaced by their exact tabular expectations, one
/// accepted step moves the parameters into the half-space of the greedy
/// improvement direction.
#[test]
fn exact_advantages_move_the_policy_toward_the_greedy_action() {
    let pair = common::aliased_toy();
    let n_b = pair.n_beliefs;
    let n_a = pair.n_actions;
    let mut net = random_net(n_b, n_a, 900);

    let belief_input = |b: usize| -> Vec<f64> {
        let mut v = vec![0.0; n_b];
        v[b] = 1.0;
        v
    };

    // freeze the tabular image of the net
    let rows: Vec<Vec<f64>> = (0..n_b).map(|b| net.forward(&belief_input(b)).unwrap().probs).collect();
    let tab = TabularPolicy {
        domain: Domain::Belief,
        probs: DMatrix::from_fn(n_b, n_a, |b, a| rows[b][a]),
    };
    let occ = occupancy(&pair, &tab);
    let v = discounted_values(&pair, &tab);
    let q_b = belief_q(&pair, &occ, &state_q(&pair, &v));
    let d_b = occ.belief_marginal();

    // one sample per (belief, action) with weights arranged so the batch
    // mean equals the exact expectation sum_b d(b) sum_a pi_theta(a|b) A(b,a)
    let mut inputs = Vec::new();
    let mut actions = Vec::new();
    let mut advantages = Vec::new();
    let mut old_logps = Vec::new();
    let mut live_beliefs = Vec::new();
    for b in 0..n_b {
        if d_b[b] <= 0.0 || (0..pair.n_states).all(|s| pair.belief_id(s) != b || pair.is_terminal(s)) {
            continue;
        }
        live_beliefs.push(b);
        let v_b: f64 = (0..n_a).map(|a| rows[b][a] * q_b[(b, a)]).sum();
        for a in 0..n_a {
            inputs.push(belief_input(b));
            actions.push(a);
            advantages.push(d_b[b] * rows[b][a] * (q_b[(b, a)] - v_b));
            old_logps.push(rows[b][a].ln());
        }
    }
    let n = actions.len();
    let advantages: Vec<f64> = advantages.into_iter().map(|x| x * n as f64).collect();
    let cols: Vec<f64> = inputs.concat();
    let batch = PolicyBatch {
        inputs: DMatrix::from_column_slice(n_b, n, &cols),
        actions,
        advantages,
        old_logps,
    };

    // improvement direction: raise the greedy action's log-probability,
    // weighted by visitation
    let mut greedy_dir = DVector::zeros(net.params.n_params());
    for &b in &live_beliefs {
        let a_star = (0..n_a)
            .max_by(|&i, &j| q_b[(b, i)].partial_cmp(&q_b[(b, j)]).unwrap())
            .unwrap();
        greedy_dir += net.grad_log_prob(&belief_input(b), a_star).unwrap() * d_b[b];
    }

    let before = net.params.flat.clone();
    let report = trpo_step(&mut net, &batch, &TrustRegionConfig::default()).unwrap();
    assert!(report.accepted, "exact advantages must yield an accepted step");
    let delta = &net.params.flat - &before;
    let inner = delta.dot(&greedy_dir);
    assert!(
        inner > 0.0,
        "step must align with the greedy improvement direction (inner {inner})"
    );
}

#[test]
fn saturated_policy_with_zero_curvature_reports_the_gradient_fallback() {
    // Output biases +-400 underflow the softmax tail to exactly zero, so the
    // Fisher information vanishes identically; with no damping the curvature
    // solve must abort and fall back to the plain gradient, and the zero
    // trust-region denominator then rejects the step outright.
    let mut net = CategoricalPolicyNet {
        params: MlpParams::zeros(1, 2, Activation::Tanh),
        domain: InputDomain::BeliefVec,
        n_actions: 2,
    };
    let n = net.params.n_params();
    net.params.flat[n - 2] = 400.0;
    net.params.flat[n - 1] = -400.0;
    let dist = net.forward(&[1.0]).unwrap();
    assert_eq!(dist.probs[1], 0.0, "tail must underflow exactly");

    let batch = PolicyBatch {
        inputs: DMatrix::from_column_slice(1, 2, &[1.0, 1.0]),
        actions: vec![0, 1],
        advantages: vec![-1.0, 1.0],
        old_logps: vec![dist.log_probs[0], dist.log_probs[1]],
    };
    let cfg = TrustRegionConfig {
        cg_damping: 0.0,
        ..TrustRegionConfig::default()
    };
    let before = net.params.flat.clone();
    let report = trpo_step(&mut net, &batch, &cfg).unwrap();
    assert!(report.gradient_fallback, "curvature breakdown must be flagged");
    assert!(!report.accepted);
    assert_eq!(net.params.flat, before);
}

/// Coin-flip absorption with constant reward 5 and gamma 0.9:
/// V = 5 + 0.9 * 0.5 * V, so V(start) = 100/11.
fn geometric_pair(reward: f64) -> a2d_core::envpair::ProcessPair {
    pair_from_tables(
        "geometric",
        1,
        vec![1.0, 0.0],
        vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]],
        vec![reward, 0.0],
        vec![false, true],
        vec![0, 1],
        0.9,
    )
}

fn reward_to_go_dataset(
    pair: &a2d_core::envpair::ProcessPair,
    n_steps: usize,
    seed: u64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let episodes = rollout(pair, n_steps, 1, &mut rng, |_, _, _| (0, 0.0, false));
    let mut inputs: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut count = 0;
    for ep in &episodes {
        // drop batch-boundary episodes so no bootstrap estimate is needed
        if ep.steps.last().map(|t| t.done) != Some(Done::Terminal) {
            continue;
        }
        let zeros = vec![0.0; ep.steps.len()];
        let rtg = discounted_returns(&ep.steps, &zeros, pair.gamma).unwrap();
        for (t, step) in ep.steps.iter().enumerate() {
            inputs.extend_from_slice(&step.b);
            targets.push(rtg[t]);
            count += 1;
        }
    }
    (
        DMatrix::from_column_slice(pair.n_beliefs, count, &inputs),
        DVector::from_vec(targets),
    )
}

#[test]
fn value_fit_recovers_the_geometric_return() {
    let pair = geometric_pair(5.0);
    let analytic = 5.0 / (1.0 - 0.9 * 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut net = ValueNet::new(pair.n_beliefs, &mut rng);
    let mut opt = value_optimizer(net.params.n_params());
    let mut losses = Vec::new();
    for round in 0..6 {
        let (inputs, targets) = reward_to_go_dataset(&pair, 2500, 2000 + round);
        let trace = fit_value(&mut net, &mut opt, &inputs, &targets, &mut rng).unwrap();
        assert_eq!(trace.len(), FIT_EPOCHS, "one mean loss per epoch");
        assert!(trace.iter().all(|l| l.is_finite()));
        losses.push(*trace.last().unwrap());
    }
    assert!(
        losses.last().unwrap() < losses.first().unwrap(),
        "training must reduce the loss across rounds"
    );
    let v = net.value(&[1.0, 0.0]);
    assert!(
        (v - analytic).abs() < 0.05 * analytic,
        "fit value {v} vs analytic {analytic}"
    );
}

#[test]
fn value_fit_on_zero_rewards_stays_near_zero() {
    let pair = geometric_pair(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let mut net = ValueNet::new(pair.n_beliefs, &mut rng);
    let mut opt = value_optimizer(net.params.n_params());
    for round in 0..3 {
        let (inputs, targets) = reward_to_go_dataset(&pair, 1500, 3100 + round);
        assert!(targets.iter().all(|t| *t == 0.0));
        fit_value(&mut net, &mut opt, &inputs, &targets, &mut rng).unwrap();
    }
    let v = net.value(&[1.0, 0.0]);
    assert!(v.abs() < 0.05, "zero-reward value drifted to {v}");
}

#[test]
fn q_fit_recovers_one_step_rewards_for_covered_actions() {
    // Deterministic single-transition data: action 0 always earns 5,
    // action 1 always earns -3. Only these covered pairs are asserted;
    // the net's extrapolation to unseen actions is unspecified.
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut net = QNet::new(2, 3, &mut rng);
    let mut opt = q_optimizer(net.params.n_params());
    let n = 512;
    let inputs = DMatrix::from_fn(2, n, |r, _| if r == 0 { 1.0 } else { 0.0 });
    let actions: Vec<usize> = (0..n).map(|t| t % 2).collect();
    let targets = DVector::from_fn(n, |t, _| if t % 2 == 0 { 5.0 } else { -3.0 });

    let mut first_epoch = f64::NAN;
    let mut last_epoch = f64::NAN;
    for round in 0..10 {
        let trace = fit_q(&mut net, &mut opt, &inputs, &actions, &targets, &mut rng).unwrap();
        if round == 0 {
            first_epoch = trace[0];
        }
        last_epoch = *trace.last().unwrap();
    }
    assert!(last_epoch < first_epoch, "loss must fall: {first_epoch} -> {last_epoch}");

    let q0 = net.q_value(&[1.0, 0.0], 0);
    let q1 = net.q_value(&[1.0, 0.0], 1);
    assert!((q0 - 5.0).abs() < 0.25, "q(., 0) = {q0}");
    assert!((q1 + 3.0).abs() < 0.15, "q(., 1) = {q1}");
}
