//! Randomized structural invariants of the exact layer.

mod common;

use a2d_core::envpair::{random_small_pair, BeliefWindow};
use a2d_core::oracle::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MASS_TOL: f64 = 1e-9;

fn random_belief_policy<R: Rng>(
    rng: &mut R,
    n_beliefs: usize,
    n_actions: usize,
) -> TabularPolicy {
    let mut pol = TabularPolicy::uniform(Domain::Belief, n_beliefs, n_actions);
    for b in 0..n_beliefs {
        let mut row: Vec<f64> = (0..n_actions).map(|_| -f64::ln(rng.gen::<f64>())).collect();
        let tot: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= tot);
        for (a, p) in row.iter().enumerate() {
            pol.probs[(b, a)] = *p;
        }
    }
    pol
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_is_a_distribution(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_small_pair(&mut rng);
        let pol = random_belief_policy(&mut rng, pair.n_beliefs, pair.n_actions);
        let occ = occupancy(&pair, &pol);
        prop_assert!((occ.total_mass() - 1.0).abs() < MASS_TOL);
        for s in 0..pair.n_states {
            prop_assert!(occ.d_state[s] >= -MASS_TOL);
        }
        // belief marginal is the sum of its members' state masses
        let d_b = occ.belief_marginal();
        for b in 0..pair.n_beliefs {
            let direct: f64 = (0..pair.n_states)
                .filter(|&s| pair.belief_of[s] == b)
                .map(|s| occ.d_state[s])
                .sum();
            prop_assert!((d_b[b] - direct).abs() < MASS_TOL);
        }
    }

    #[test]
    fn truncated_occupancy_tracks_the_linear_solve(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_small_pair(&mut rng);
        let pol = random_belief_policy(&mut rng, pair.n_beliefs, pair.n_actions);
        let exact = occupancy(&pair, &pol);
        let approx = occupancy_truncated(&pair, &pol, OCCUPANCY_TRUNC_EPS);
        let tv: f64 = 0.5 * (&exact.d_state - &approx.d_state).abs().sum();
        prop_assert!(tv < 1e-6, "tv = {}", tv);
    }

    #[test]
    fn implicit_policies_are_row_stochastic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_small_pair(&mut rng);
        let behavior = random_belief_policy(&mut rng, pair.n_beliefs, pair.n_actions);
        let occ = occupancy(&pair, &behavior);
        // a random deterministic expert
        let actions: Vec<usize> = (0..pair.n_states)
            .map(|_| rng.gen_range(0..pair.n_actions))
            .collect();
        let expert = TabularPolicy::deterministic(Domain::State, &actions, pair.n_actions);
        let imp = implicit_policy(&pair, &expert, &occ).unwrap();
        prop_assert!(imp.policy.is_row_stochastic());
        // flagged rows are exactly the uniform ones forced by zero mass
        let d_b = occ.belief_marginal();
        for b in 0..pair.n_beliefs {
            let flagged = imp.zero_occupancy_beliefs.contains(&b);
            prop_assert_eq!(flagged, d_b[b] <= 0.0, "belief {}", b);
            if flagged {
                for a in 0..pair.n_actions {
                    prop_assert!((imp.policy.probs[(b, a)] - 1.0 / pair.n_actions as f64).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn divergence_drops_when_the_trainee_matches(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_small_pair(&mut rng);
        let behavior = random_belief_policy(&mut rng, pair.n_beliefs, pair.n_actions);
        let occ = occupancy(&pair, &behavior);
        let expert_actions: Vec<usize> = (0..pair.n_states)
            .map(|_| rng.gen_range(0..pair.n_actions))
            .collect();
        let expert = TabularPolicy::deterministic(Domain::State, &expert_actions, pair.n_actions);
        let imp = implicit_policy(&pair, &expert, &occ).unwrap().policy;
        let at_minimizer = ail_objective(&pair, &expert, &imp, &occ);
        let elsewhere = ail_objective(&pair, &expert, &behavior, &occ);
        prop_assert!(at_minimizer <= elsewhere + 1e-10);
        prop_assert!(at_minimizer >= -1e-12); // a KL average cannot go negative
    }

    #[test]
    fn window_flattening_is_length_stable(
        window in 1usize..4,
        obs_len in 1usize..8,
        n_actions in 2usize..5,
        steps in 0usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<f64> = (0..obs_len).map(|_| rng.gen::<f64>()).collect();
        let mut bw = BeliefWindow::start(window, n_actions, &obs);
        let expect = window * obs_len + (window - 1) * n_actions;
        prop_assert_eq!(bw.flat_len(), expect);
        for _ in 0..steps {
            let next_obs: Vec<f64> = (0..obs_len).map(|_| rng.gen::<f64>()).collect();
            let a = rng.gen_range(0..n_actions);
            bw = a2d_core::envpair::belief_update(&bw, &next_obs, a).unwrap();
            prop_assert_eq!(bw.flatten().len(), expect);
            // most recent observation occupies the last observation slot
            let tail = &bw.flatten()[(window - 1) * obs_len..window * obs_len];
            prop_assert_eq!(tail, &next_obs[..]);
        }
    }

    #[test]
    fn divergence_measures_agree_on_sign(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = random_small_pair(&mut rng);
        let expert_actions: Vec<usize> = (0..pair.n_states)
            .map(|_| rng.gen_range(0..pair.n_actions))
            .collect();
        let expert = TabularPolicy::deterministic(Domain::State, &expert_actions, pair.n_actions);
        let report = identifiability_report(&pair, &expert);
        prop_assert!(report.divergence >= -1e-12);
        if report.identifiable {
            prop_assert!(report.divergence < IDENTIFIABILITY_TOL);
        }
    }
}
