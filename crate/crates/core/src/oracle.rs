//! Exact computations on enumerable pairs: discounted occupancies, implicit
//! policies, optimal policies for both views, policy evaluation, the
//! imitation fixed-point iteration, identifiability diagnostics, the
//! surrogate bound check, and the exact variant of the adaptive imitation
//! update. These serve as ground truth for everything the learned stack does.

use crate::envpair::ProcessPair;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Value-iteration sweeps stop below this sup-norm residual. Much tighter
/// than the documented 1e-10 bound so that greedy tie detection is stable.
pub const VI_RESIDUAL_TOL: f64 = 1e-13;
/// Actions within this of the best Q value count as tied; the lowest index
/// wins. Keeps canonical experts reproducible.
pub const ACTION_TIE_TOL: f64 = 1e-9;
/// Mass allowed to be missing from a truncated occupancy sum.
pub const OCCUPANCY_TRUNC_EPS: f64 = 1e-8;
/// Fixed-point iteration stops when no belief row moves more than this in
/// total variation.
pub const FIXED_POINT_TV_TOL: f64 = 1e-8;
pub const FIXED_POINT_MAX_ITERS: usize = 500;
/// An expert is identifiable when the fixed-point divergence is below this.
pub const IDENTIFIABILITY_TOL: f64 = 1e-8;
/// Exact-vs-derived value agreement required of the belief-space planner on
/// every reachable (belief, action) it commits to.
pub const BELIEF_MODEL_CONSISTENCY_TOL: f64 = 1e-6;
/// Beliefs with occupancy above this count as reachable for the check.
pub const REACHABLE_MASS_TOL: f64 = 1e-12;
/// The surrogate right-hand side enumerates deterministic experts
/// exhaustively up to this many; beyond it a local-search certificate is
/// used instead.
pub const SURROGATE_EXHAUSTIVE_LIMIT: usize = 200;
/// Numerical slack for the surrogate comparison.
pub const SURROGATE_NUM_TOL: f64 = 1e-9;
/// The exact adaptive update enumerates the inner argmax exhaustively when
/// the deterministic-expert class is at most this large.
pub const INNER_ENUMERATION_LIMIT: usize = 1 << 20;
pub const EXACT_A2D_MAX_ITERS: usize = 500;
/// Outer iteration of the exact adaptive update stops below this trainee
/// movement (max row TV).
pub const EXACT_A2D_TV_TOL: f64 = 1e-10;
/// Local search accepts only strictly improving moves (beyond this slack).
pub const LOCAL_SEARCH_IMPROVE_TOL: f64 = 1e-12;
pub const LOCAL_SEARCH_MAX_SWEEPS: usize = 60;
/// Row-stochasticity tolerance for tabular policies.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(
        "derived belief model inconsistent at belief {belief}, action {action}: \
         exact {exact} vs derived {derived} (gap {gap:e})"
    )]
    BeliefModelInconsistent {
        belief: usize,
        action: usize,
        exact: f64,
        derived: f64,
        gap: f64,
    },
    #[error("expected a {expected:?}-domain policy")]
    DomainMismatch { expected: Domain },
    #[error("policy has {rows} rows but the pair needs {expected}")]
    ShapeMismatch { rows: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Domain {
    State,
    Belief,
}

/// Exact stochastic policy matrix over states or beliefs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TabularPolicy {
    pub domain: Domain,
    /// Row-stochastic |X| x |A|.
    pub probs: DMatrix<f64>,
}

impl TabularPolicy {
    pub fn uniform(domain: Domain, rows: usize, n_actions: usize) -> Self {
        TabularPolicy {
            domain,
            probs: DMatrix::from_element(rows, n_actions, 1.0 / n_actions as f64),
        }
    }

    /// Deterministic policy from an action index per row.
    pub fn deterministic(domain: Domain, actions: &[usize], n_actions: usize) -> Self {
        let mut probs = DMatrix::zeros(actions.len(), n_actions);
        for (x, a) in actions.iter().enumerate() {
            probs[(x, *a)] = 1.0;
        }
        TabularPolicy { domain, probs }
    }

    pub fn n_rows(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, x: usize) -> Vec<f64> {
        self.probs.row(x).iter().copied().collect()
    }

    /// Rows sum to one within [`ROW_SUM_TOL`] and have no negative entries.
    pub fn is_row_stochastic(&self) -> bool {
        (0..self.n_rows()).all(|x| {
            let row = self.probs.row(x);
            let sum: f64 = row.iter().sum();
            (sum - 1.0).abs() <= ROW_SUM_TOL && row.iter().all(|p| *p >= 0.0)
        })
    }

    /// Lowest-index argmax row action.
    pub fn argmax_action(&self, x: usize) -> usize {
        let row = self.probs.row(x);
        let mut best = 0;
        for a in 1..self.n_actions() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }
}

/// Discounted, normalized visitation measure over (state, belief). With
/// window-1 beliefs the belief is a function of the state, so the joint is
/// carried as the state marginal plus the belief map.
#[derive(Debug, Clone)]
pub struct OccupancyTable {
    pub d_state: DVector<f64>,
    pub belief_of: Vec<usize>,
    pub n_beliefs: usize,
    /// Upper bound on the mass missing from a truncated sum (0 when solved
    /// exactly).
    pub truncation_error: f64,
}

impl OccupancyTable {
    pub fn mass(&self, s: usize, b: usize) -> f64 {
        if self.belief_of[s] == b {
            self.d_state[s]
        } else {
            0.0
        }
    }

    pub fn state_marginal(&self) -> &DVector<f64> {
        &self.d_state
    }

    pub fn belief_marginal(&self) -> DVector<f64> {
        let mut d_b = DVector::zeros(self.n_beliefs);
        for (s, b) in self.belief_of.iter().enumerate() {
            d_b[*b] += self.d_state[s];
        }
        d_b
    }

    pub fn total_mass(&self) -> f64 {
        self.d_state.sum()
    }

    /// Conditional state weights w(s|b) for one belief; uniform over the
    /// belief's member states when the belief has zero mass.
    pub fn state_weights_given_belief(&self, b: usize) -> Vec<(usize, f64)> {
        let members: Vec<usize> = self
            .belief_of
            .iter()
            .enumerate()
            .filter(|(_, bb)| **bb == b)
            .map(|(s, _)| s)
            .collect();
        let tot: f64 = members.iter().map(|s| self.d_state[*s]).sum();
        if tot > 0.0 {
            members
                .iter()
                .map(|s| (*s, self.d_state[*s] / tot))
                .collect()
        } else {
            let w = 1.0 / members.len() as f64;
            members.iter().map(|s| (*s, w)).collect()
        }
    }
}

/// KL(p || q) over one action row; infinite when q is zero where p is not.
pub fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            if *qi <= 0.0 {
                return f64::INFINITY;
            }
            kl += pi * (pi / qi).ln();
        }
    }
    kl
}

/// Total variation distance between two action rows.
pub fn tv_row(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// Restates a policy on the state domain: belief policies are composed with
/// the belief map, state policies pass through.
pub fn to_state_policy(pair: &ProcessPair, policy: &TabularPolicy) -> TabularPolicy {
    match policy.domain {
        Domain::State => policy.clone(),
        Domain::Belief => {
            let mut probs = DMatrix::zeros(pair.n_states, pair.n_actions);
            for s in 0..pair.n_states {
                probs.set_row(s, &policy.probs.row(pair.belief_of[s]));
            }
            TabularPolicy {
                domain: Domain::State,
                probs,
            }
        }
    }
}

/// Dense policy-induced transition matrix and reward vector.
fn chain(pair: &ProcessPair, state_policy: &TabularPolicy) -> (DMatrix<f64>, DVector<f64>) {
    let n = pair.n_states;
    let mut p = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for s in 0..n {
        for a in 0..pair.n_actions {
            let pa = state_policy.probs[(s, a)];
            if pa == 0.0 {
                continue;
            }
            r[s] += pa * pair.rew[s * pair.n_actions + a];
            for &(s2, pr) in &pair.trans[s * pair.n_actions + a] {
                p[(s, s2)] += pa * pr;
            }
        }
    }
    (p, r)
}

/// Exact discounted occupancy d(s) = (1-gamma) sum_t gamma^t q_t(s) via the
/// linear system (I - gamma P^T) d = (1-gamma) p0.
pub fn occupancy(pair: &ProcessPair, policy: &TabularPolicy) -> OccupancyTable {
    let sp = to_state_policy(pair, policy);
    let (p, _) = chain(pair, &sp);
    let n = pair.n_states;
    let a = DMatrix::identity(n, n) - p.transpose() * pair.gamma;
    let p0 = DVector::from_column_slice(&pair.init);
    let d = a
        .lu()
        .solve(&p0)
        .expect("(I - gamma P^T) is nonsingular for gamma < 1")
        * (1.0 - pair.gamma);
    OccupancyTable {
        d_state: d,
        belief_of: pair.belief_of.clone(),
        n_beliefs: pair.n_beliefs,
        truncation_error: 0.0,
    }
}

/// Occupancy by truncated geometric sum; stops once the remaining mass bound
/// drops below `eps`.
pub fn occupancy_truncated(pair: &ProcessPair, policy: &TabularPolicy, eps: f64) -> OccupancyTable {
    let sp = to_state_policy(pair, policy);
    let (p, _) = chain(pair, &sp);
    let pt = p.transpose();
    let mut q = DVector::from_column_slice(&pair.init);
    let mut d: DVector<f64> = DVector::zeros(pair.n_states);
    let mut w = 1.0 - pair.gamma; // (1-gamma) * gamma^t
    let mut remaining = 1.0; // gamma^t
    while remaining > eps {
        d += &q * w;
        q = &pt * q;
        w *= pair.gamma;
        remaining *= pair.gamma;
    }
    OccupancyTable {
        d_state: d,
        belief_of: pair.belief_of.clone(),
        n_beliefs: pair.n_beliefs,
        truncation_error: remaining,
    }
}

/// The implicit policy: the expert marginalized over the conditional state
/// occupancy, pi_hat(a|b) = sum_s w(s|b) pi(a|s). Beliefs with zero
/// occupancy get uniform rows and are reported.
pub struct ImplicitPolicy {
    pub policy: TabularPolicy,
    pub zero_occupancy_beliefs: Vec<usize>,
}

pub fn implicit_policy(
    pair: &ProcessPair,
    expert: &TabularPolicy,
    occ: &OccupancyTable,
) -> Result<ImplicitPolicy, OracleError> {
    if expert.domain != Domain::State {
        return Err(OracleError::DomainMismatch {
            expected: Domain::State,
        });
    }
    let na = pair.n_actions;
    let mut probs = DMatrix::from_element(pair.n_beliefs, na, 1.0 / na as f64);
    let mut mass = vec![0.0f64; pair.n_beliefs];
    let mut rows = DMatrix::<f64>::zeros(pair.n_beliefs, na);
    for s in 0..pair.n_states {
        let b = pair.belief_of[s];
        let d = occ.d_state[s];
        if d == 0.0 {
            continue;
        }
        mass[b] += d;
        for a in 0..na {
            rows[(b, a)] += d * expert.probs[(s, a)];
        }
    }
    let mut zero = Vec::new();
    for b in 0..pair.n_beliefs {
        if mass[b] > 0.0 {
            for a in 0..na {
                probs[(b, a)] = rows[(b, a)] / mass[b];
            }
        } else {
            zero.push(b);
        }
    }
    Ok(ImplicitPolicy {
        policy: TabularPolicy {
            domain: Domain::Belief,
            probs,
        },
        zero_occupancy_beliefs: zero,
    })
}

/// Occupancy-weighted imitation objective
/// F = sum_{s} d(s) KL(expert(.|s) || trainee(.|belief(s))).
/// Returns +infinity when the trainee is zero somewhere the expert (under
/// positive occupancy) is not.
pub fn ail_objective(
    pair: &ProcessPair,
    expert: &TabularPolicy,
    trainee: &TabularPolicy,
    occ: &OccupancyTable,
) -> f64 {
    let mut f = 0.0;
    for s in 0..pair.n_states {
        let d = occ.d_state[s];
        if d == 0.0 {
            continue;
        }
        let kl = kl_row(&expert.row(s), &trainee.row(pair.belief_of[s]));
        if kl.is_infinite() {
            return f64::INFINITY;
        }
        f += d * kl;
    }
    f
}

/// Exact policy evaluation on the joint chain: discounted values per state,
/// undiscounted expected total reward (requires almost-sure absorption), and
/// the start-distribution returns.
pub struct EvalReport {
    pub v_disc: DVector<f64>,
    pub v_undisc: DVector<f64>,
    pub disc_return: f64,
    pub undisc_return: f64,
}

pub fn policy_evaluation(pair: &ProcessPair, policy: &TabularPolicy) -> EvalReport {
    let sp = to_state_policy(pair, policy);
    let (p, r) = chain(pair, &sp);
    let v_disc = discounted_chain_values(pair, &p, &r);

    // Undiscounted values exist only where the policy absorbs almost surely,
    // so solve V = r + P V (V = 0 at terminals) on the set reachable from the
    // start distribution and mark everything else NaN. On chains with no
    // reachable terminal the total-reward criterion is undefined and the
    // whole undiscounted side is NaN.
    let reachable = reachable_states(pair, &p);
    let absorbs = (0..pair.n_states).any(|s| reachable[s] && pair.terminal[s]);
    let live: Vec<usize> = (0..pair.n_states)
        .filter(|&s| reachable[s] && !pair.terminal[s])
        .collect();
    let mut v_undisc = DVector::from_element(pair.n_states, f64::NAN);
    for s in 0..pair.n_states {
        if pair.terminal[s] {
            v_undisc[s] = 0.0;
        }
    }
    if absorbs {
        let m = live.len();
        let mut a_un = DMatrix::zeros(m, m);
        let mut r_un = DVector::zeros(m);
        for (i, &s) in live.iter().enumerate() {
            r_un[i] = r[s];
            for (j, &s2) in live.iter().enumerate() {
                a_un[(i, j)] = if i == j { 1.0 } else { 0.0 };
                a_un[(i, j)] -= p[(s, s2)];
            }
        }
        let v_live = a_un
            .lu()
            .solve(&r_un)
            .expect("undiscounted evaluation needs almost-sure absorption from the start set");
        for (i, &s) in live.iter().enumerate() {
            v_undisc[s] = v_live[i];
        }
    }

    let p0 = DVector::from_column_slice(&pair.init);
    let undisc_return = (0..pair.n_states)
        .filter(|&s| pair.init[s] > 0.0)
        .map(|s| pair.init[s] * v_undisc[s])
        .sum();
    EvalReport {
        disc_return: p0.dot(&v_disc),
        undisc_return,
        v_disc,
        v_undisc,
    }
}

/// Discounted state values of a policy (always well posed for gamma < 1).
pub fn discounted_values(pair: &ProcessPair, policy: &TabularPolicy) -> DVector<f64> {
    let sp = to_state_policy(pair, policy);
    let (p, r) = chain(pair, &sp);
    discounted_chain_values(pair, &p, &r)
}

fn discounted_chain_values(pair: &ProcessPair, p: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let n = pair.n_states;
    let a_disc = DMatrix::identity(n, n) - p * pair.gamma;
    a_disc
        .lu()
        .solve(r)
        .expect("discounted evaluation system is nonsingular")
}

fn reachable_states(pair: &ProcessPair, p: &DMatrix<f64>) -> Vec<bool> {
    let mut reachable = vec![false; pair.n_states];
    let mut stack: Vec<usize> = (0..pair.n_states).filter(|&s| pair.init[s] > 0.0).collect();
    for &s in &stack {
        reachable[s] = true;
    }
    while let Some(s) = stack.pop() {
        if pair.terminal[s] {
            continue;
        }
        for s2 in 0..pair.n_states {
            if p[(s, s2)] > 0.0 && !reachable[s2] {
                reachable[s2] = true;
                stack.push(s2);
            }
        }
    }
    reachable
}

/// State-action values from a discounted state value vector (terminal
/// continuation is zero).
pub fn state_q(pair: &ProcessPair, v_disc: &DVector<f64>) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(pair.n_states, pair.n_actions);
    for s in 0..pair.n_states {
        for a in 0..pair.n_actions {
            let mut qa = pair.rew[s * pair.n_actions + a];
            for &(s2, pr) in &pair.trans[s * pair.n_actions + a] {
                if !pair.terminal[s2] {
                    qa += pair.gamma * pr * v_disc[s2];
                }
            }
            q[(s, a)] = qa;
        }
    }
    q
}

/// Belief-action values under a given occupancy: Q(a,b) = sum_s w(s|b) Q(s,a).
pub fn belief_q(pair: &ProcessPair, occ: &OccupancyTable, q_sa: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(pair.n_beliefs, pair.n_actions);
    for b in 0..pair.n_beliefs {
        for (s, w) in occ.state_weights_given_belief(b) {
            for a in 0..pair.n_actions {
                q[(b, a)] += w * q_sa[(s, a)];
            }
        }
    }
    q
}

/// Lowest-index greedy action among those within [`ACTION_TIE_TOL`] of max.
fn greedy_action(q_row: &[f64]) -> usize {
    let best = q_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    q_row
        .iter()
        .position(|q| *q >= best - ACTION_TIE_TOL)
        .unwrap()
}

pub struct MdpSolution {
    pub policy: TabularPolicy,
    pub actions: Vec<usize>,
    pub v_disc: DVector<f64>,
    pub residual: f64,
    pub sweeps: usize,
    pub undisc_return: f64,
    pub disc_return: f64,
}

/// Optimal fully-observed policy by value iteration to below
/// [`VI_RESIDUAL_TOL`], greedy with lowest-index tie-breaking.
pub fn optimal_mdp_policy(pair: &ProcessPair) -> MdpSolution {
    let n = pair.n_states;
    let na = pair.n_actions;
    let mut v = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    while residual > VI_RESIDUAL_TOL {
        sweeps += 1;
        let mut v_next = DVector::zeros(n);
        for s in 0..n {
            if pair.terminal[s] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let mut qa = pair.rew[s * na + a];
                for &(s2, pr) in &pair.trans[s * na + a] {
                    if !pair.terminal[s2] {
                        qa += pair.gamma * pr * v[s2];
                    }
                }
                best = best.max(qa);
            }
            v_next[s] = best;
        }
        residual = (&v_next - &v).amax();
        v = v_next;
    }
    let q = state_q(pair, &v);
    let actions: Vec<usize> = (0..n)
        .map(|s| greedy_action(&q.row(s).iter().copied().collect::<Vec<_>>()))
        .collect();
    let policy = TabularPolicy::deterministic(Domain::State, &actions, na);
    let eval = policy_evaluation(pair, &policy);
    MdpSolution {
        policy,
        actions,
        v_disc: v,
        residual,
        sweeps,
        undisc_return: eval.undisc_return,
        disc_return: eval.disc_return,
    }
}

pub struct PomdpSolution {
    pub policy: TabularPolicy,
    pub actions: Vec<usize>,
    /// Values of the derived belief model.
    pub v_belief: DVector<f64>,
    pub residual: f64,
    pub undisc_return: f64,
    pub disc_return: f64,
    /// Largest exact-vs-derived value gap found on reachable commitments.
    pub consistency_gap: f64,
}

/// Optimal belief policy by value iteration on a derived belief model whose
/// state weights come from the uniform-reference occupancy, then an exact
/// joint-chain evaluation. Errs when the derived model's value disagrees
/// with the exact value on any reachable (belief, action) the returned
/// policy commits to — the guard against non-Markov belief aliasing.
pub fn optimal_pomdp_policy(pair: &ProcessPair) -> Result<PomdpSolution, OracleError> {
    let nb = pair.n_beliefs;
    let na = pair.n_actions;
    let reference = TabularPolicy::uniform(Domain::State, pair.n_states, na);
    let occ_ref = occupancy(pair, &reference);

    // belief is terminal when all member states are
    let mut belief_terminal = vec![true; nb];
    for s in 0..pair.n_states {
        if !pair.terminal[s] {
            belief_terminal[pair.belief_of[s]] = false;
        }
    }

    // derived model under reference weights
    let mut r_b = DMatrix::zeros(nb, na);
    let mut p_b = vec![vec![0.0f64; nb]; nb * na];
    for b in 0..nb {
        for (s, w) in occ_ref.state_weights_given_belief(b) {
            for a in 0..na {
                r_b[(b, a)] += w * pair.rew[s * na + a];
                for &(s2, pr) in &pair.trans[s * na + a] {
                    p_b[b * na + a][pair.belief_of[s2]] += w * pr;
                }
            }
        }
    }

    let mut v = DVector::zeros(nb);
    let mut residual = f64::INFINITY;
    while residual > VI_RESIDUAL_TOL {
        let mut v_next = DVector::zeros(nb);
        for b in 0..nb {
            if belief_terminal[b] {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let mut qa = r_b[(b, a)];
                for (b2, pr) in p_b[b * na + a].iter().enumerate() {
                    if *pr > 0.0 && !belief_terminal[b2] {
                        qa += pair.gamma * pr * v[b2];
                    }
                }
                best = best.max(qa);
            }
            v_next[b] = best;
        }
        residual = (&v_next - &v).amax();
        v = v_next;
    }
    let mut q_derived = DMatrix::zeros(nb, na);
    let mut actions = vec![0usize; nb];
    for b in 0..nb {
        let mut row = vec![0.0f64; na];
        for (a, q) in row.iter_mut().enumerate() {
            let mut qa = r_b[(b, a)];
            for (b2, pr) in p_b[b * na + a].iter().enumerate() {
                if *pr > 0.0 && !belief_terminal[b2] {
                    qa += pair.gamma * pr * v[b2];
                }
            }
            q_derived[(b, a)] = qa;
            *q = qa;
        }
        actions[b] = greedy_action(&row);
    }
    let policy = TabularPolicy::deterministic(Domain::Belief, &actions, na);

    // exact evaluation and the consistency check on reachable commitments
    let eval = policy_evaluation(pair, &policy);
    let occ_pol = occupancy(pair, &policy);
    let d_belief = occ_pol.belief_marginal();
    let q_sa_exact = state_q(pair, &eval.v_disc);
    let mut worst_gap = 0.0f64;
    let mut worst: Option<(usize, usize, f64, f64)> = None;
    for b in 0..nb {
        if belief_terminal[b] || d_belief[b] <= REACHABLE_MASS_TOL {
            continue;
        }
        let a = actions[b];
        let mut exact = 0.0;
        for (s, w) in occ_pol.state_weights_given_belief(b) {
            exact += w * q_sa_exact[(s, a)];
        }
        let derived = q_derived[(b, a)];
        let gap = (exact - derived).abs();
        if gap > worst_gap {
            worst_gap = gap;
            worst = Some((b, a, exact, derived));
        }
    }
    if worst_gap > BELIEF_MODEL_CONSISTENCY_TOL {
        let (belief, action, exact, derived) = worst.unwrap();
        return Err(OracleError::BeliefModelInconsistent {
            belief,
            action,
            exact,
            derived,
            gap: worst_gap,
        });
    }

    Ok(PomdpSolution {
        policy,
        actions,
        v_belief: v,
        residual,
        undisc_return: eval.undisc_return,
        disc_return: eval.disc_return,
        consistency_gap: worst_gap,
    })
}

/// Iterated imitation: trainee_{k+1} = implicit(expert, occupancy(trainee_k))
/// from a uniform start. Non-convergence is reported, not fatal.
pub struct FixedPointReport {
    pub trainee: TabularPolicy,
    pub iterations: usize,
    pub converged: bool,
    pub residual_tv: f64,
    pub undisc_return: f64,
    pub disc_return: f64,
}

pub fn ail_fixed_point(pair: &ProcessPair, expert: &TabularPolicy) -> FixedPointReport {
    let mut trainee = TabularPolicy::uniform(Domain::Belief, pair.n_beliefs, pair.n_actions);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < FIXED_POINT_MAX_ITERS {
        iterations += 1;
        let occ = occupancy(pair, &trainee);
        let next = implicit_policy(pair, expert, &occ)
            .expect("expert is a state policy")
            .policy;
        residual = (0..pair.n_beliefs)
            .map(|b| tv_row(&trainee.row(b), &next.row(b)))
            .fold(0.0, f64::max);
        trainee = next;
        if residual < FIXED_POINT_TV_TOL {
            converged = true;
            break;
        }
    }
    let eval = policy_evaluation(pair, &trainee);
    FixedPointReport {
        trainee,
        iterations,
        converged,
        residual_tv: residual,
        undisc_return: eval.undisc_return,
        disc_return: eval.disc_return,
    }
}

/// Identifiability diagnosis for an expert: the occupancy-weighted
/// divergence between the expert and its fixed-point imitation, and the
/// return gap that divergence costs.
pub struct IdentifiabilityReport {
    pub divergence: f64,
    pub identifiable: bool,
    pub expert_return: f64,
    pub trainee_return: f64,
    pub return_gap: f64,
    pub fixed_point: FixedPointReport,
}

pub fn identifiability_report(pair: &ProcessPair, expert: &TabularPolicy) -> IdentifiabilityReport {
    let fp = ail_fixed_point(pair, expert);
    let occ = occupancy(pair, &fp.trainee);
    let divergence = ail_objective(pair, expert, &fp.trainee, &occ);
    let expert_return = policy_evaluation(pair, expert).undisc_return;
    IdentifiabilityReport {
        divergence,
        identifiable: fp.converged && divergence < IDENTIFIABILITY_TOL,
        expert_return,
        trainee_return: fp.undisc_return,
        return_gap: expert_return - fp.undisc_return,
        fixed_point: fp,
    }
}

/// Expected per-step divergence between the expert and a belief policy under
/// the belief policy's own (undiscounted, horizon-capped) visitation. This
/// is the exact analogue of the rolling-buffer KL diagnostic the learned
/// stack logs, and supplies the identifiability-fixture thresholds.
pub fn undiscounted_divergence(
    pair: &ProcessPair,
    expert: &TabularPolicy,
    trainee: &TabularPolicy,
) -> f64 {
    let sp = to_state_policy(pair, trainee);
    let (p, _) = chain(pair, &sp);
    let pt = p.transpose();
    let mut q = DVector::from_column_slice(&pair.init);
    let mut visits: DVector<f64> = DVector::zeros(pair.n_states);
    for _ in 0..pair.horizon {
        visits += &q;
        q = &pt * q;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for s in 0..pair.n_states {
        if pair.terminal[s] || visits[s] == 0.0 {
            continue;
        }
        let kl = kl_row(&expert.row(s), &trainee.row(pair.belief_of[s]));
        if kl.is_infinite() {
            return f64::INFINITY;
        }
        num += visits[s] * kl;
        den += visits[s];
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Deterministic-expert search shared by the surrogate check and the exact
// adaptive update
// ---------------------------------------------------------------------------

/// Value of a deterministic expert under a frozen occupancy: the expert is
/// marginalized into its implicit belief policy, that policy is evaluated
/// exactly, and the discounted values are averaged over the occupancy.
pub fn implicit_value_objective(pair: &ProcessPair, occ: &OccupancyTable, actions: &[usize]) -> f64 {
    let expert = TabularPolicy::deterministic(Domain::State, actions, pair.n_actions);
    let trainee = implicit_policy(pair, &expert, occ)
        .expect("deterministic experts are state policies")
        .policy;
    let v_disc = discounted_values(pair, &trainee);
    let mut j = 0.0;
    for s in 0..pair.n_states {
        if !pair.terminal[s] {
            j += occ.d_state[s] * v_disc[s];
        }
    }
    j
}

pub struct ExpertSearch {
    pub actions: Vec<usize>,
    pub objective: f64,
    pub evaluations: usize,
    pub exhaustive: bool,
}

/// Exhaustive argmax over all deterministic experts (nonterminal states).
fn exhaustive_expert_argmax(pair: &ProcessPair, occ: &OccupancyTable) -> ExpertSearch {
    let nonterm: Vec<usize> = (0..pair.n_states).filter(|s| !pair.terminal[*s]).collect();
    let mut actions = vec![0usize; pair.n_states];
    let mut best_actions = actions.clone();
    let mut best = f64::NEG_INFINITY;
    let mut evaluations = 0;
    let mut digits = vec![0usize; nonterm.len()];
    loop {
        for (i, s) in nonterm.iter().enumerate() {
            actions[*s] = digits[i];
        }
        let j = implicit_value_objective(pair, occ, &actions);
        evaluations += 1;
        if j > best {
            best = j;
            best_actions = actions.clone();
        }
        // increment the mixed-radix counter
        let mut i = 0;
        loop {
            if i == digits.len() {
                return ExpertSearch {
                    actions: best_actions,
                    objective: best,
                    evaluations,
                    exhaustive: true,
                };
            }
            digits[i] += 1;
            if digits[i] < pair.n_actions {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// First-improvement local search over deterministic experts: belief-aligned
/// group moves (set every member state of a belief to one action) then
/// per-state moves, repeated until no strict improvement.
fn local_expert_argmax(pair: &ProcessPair, occ: &OccupancyTable, warm: &[usize]) -> ExpertSearch {
    let mut actions = warm.to_vec();
    let mut best = implicit_value_objective(pair, occ, &actions);
    let mut evaluations = 1;
    let members: Vec<Vec<usize>> = (0..pair.n_beliefs)
        .map(|b| {
            (0..pair.n_states)
                .filter(|s| pair.belief_of[*s] == b && !pair.terminal[*s])
                .collect()
        })
        .collect();
    for _sweep in 0..LOCAL_SEARCH_MAX_SWEEPS {
        let mut improved = false;
        for group in members.iter().filter(|m| !m.is_empty()) {
            for a in 0..pair.n_actions {
                if group.iter().all(|s| actions[*s] == a) {
                    continue;
                }
                let saved: Vec<usize> = group.iter().map(|s| actions[*s]).collect();
                for s in group {
                    actions[*s] = a;
                }
                let j = implicit_value_objective(pair, occ, &actions);
                evaluations += 1;
                if j > best + LOCAL_SEARCH_IMPROVE_TOL {
                    best = j;
                    improved = true;
                } else {
                    for (s, old) in group.iter().zip(saved) {
                        actions[*s] = old;
                    }
                }
            }
        }
        for s in 0..pair.n_states {
            if pair.terminal[s] {
                continue;
            }
            for a in 0..pair.n_actions {
                if a == actions[s] {
                    continue;
                }
                let saved = actions[s];
                actions[s] = a;
                let j = implicit_value_objective(pair, occ, &actions);
                evaluations += 1;
                if j > best + LOCAL_SEARCH_IMPROVE_TOL {
                    best = j;
                    improved = true;
                } else {
                    actions[s] = saved;
                }
            }
        }
        if !improved {
            break;
        }
    }
    ExpertSearch {
        actions,
        objective: best,
        evaluations,
        exhaustive: false,
    }
}

fn expert_argmax(pair: &ProcessPair, occ: &OccupancyTable, warm: &[usize]) -> ExpertSearch {
    match pair.deterministic_expert_count() {
        Some(count) if count <= INNER_ENUMERATION_LIMIT => exhaustive_expert_argmax(pair, occ),
        _ => local_expert_argmax(pair, occ, warm),
    }
}

/// The surrogate comparison: pointwise-greedy value of the frozen critic
/// (left) against the best achievable implicit-policy value over
/// deterministic experts (right). `exhaustive = false` means the right side
/// is a local-search certificate over a restricted expert class, which can
/// only understate the true maximum — the bound still certifies.
pub struct SurrogateReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub exhaustive: bool,
    pub expert_actions: Vec<usize>,
    pub note: Option<String>,
}

pub fn surrogate_bound_check(pair: &ProcessPair, trainee: &TabularPolicy) -> SurrogateReport {
    let occ = occupancy(pair, trainee);
    let v_disc = discounted_values(pair, trainee);
    let q_sa = state_q(pair, &v_disc);
    let q_ab = belief_q(pair, &occ, &q_sa);
    let d_b = occ.belief_marginal();
    let mut belief_terminal = vec![true; pair.n_beliefs];
    for s in 0..pair.n_states {
        if !pair.terminal[s] {
            belief_terminal[pair.belief_of[s]] = false;
        }
    }
    let mut lhs = 0.0;
    for b in 0..pair.n_beliefs {
        if belief_terminal[b] || d_b[b] == 0.0 {
            continue;
        }
        let best = (0..pair.n_actions)
            .map(|a| q_ab[(b, a)])
            .fold(f64::NEG_INFINITY, f64::max);
        lhs += d_b[b] * best;
    }

    let warm: Vec<usize> = (0..pair.n_states).map(|_| 0).collect();
    let search = match pair.deterministic_expert_count() {
        Some(count) if count <= SURROGATE_EXHAUSTIVE_LIMIT => exhaustive_expert_argmax(pair, &occ),
        _ => local_expert_argmax(pair, &occ, &warm),
    };
    let note = if search.exhaustive {
        None
    } else {
        Some(
            "right side maximized by local search over deterministic experts; \
             it lower-bounds the true maximum, so the check remains sound"
                .to_string(),
        )
    };
    SurrogateReport {
        lhs,
        rhs: search.objective,
        holds: lhs <= search.objective + SURROGATE_NUM_TOL,
        exhaustive: search.exhaustive,
        expert_actions: search.actions,
        note,
    }
}

/// Exact adaptive imitation update. Alternates (a) the inner argmax over
/// deterministic experts of the implicit-policy value under the current
/// trainee occupancy with (b) the imitation projection onto the implicit
/// policy, starting from a uniform trainee.
pub struct ExactA2dReport {
    pub trainee: TabularPolicy,
    pub expert_actions: Vec<usize>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub undisc_return: f64,
    pub disc_return: f64,
    pub inner_exhaustive: bool,
    pub evaluations: usize,
}

pub fn exact_a2d(pair: &ProcessPair) -> ExactA2dReport {
    let mut trainee = TabularPolicy::uniform(Domain::Belief, pair.n_beliefs, pair.n_actions);
    let mut expert_actions = optimal_mdp_policy(pair).actions;
    let mut converged = false;
    let mut outer_iterations = 0;
    let mut evaluations = 0;
    let mut inner_exhaustive = true;
    while outer_iterations < EXACT_A2D_MAX_ITERS {
        outer_iterations += 1;
        let occ = occupancy(pair, &trainee);
        let search = expert_argmax(pair, &occ, &expert_actions);
        evaluations += search.evaluations;
        inner_exhaustive &= search.exhaustive;
        expert_actions = search.actions;
        let expert =
            TabularPolicy::deterministic(Domain::State, &expert_actions, pair.n_actions);
        let next = implicit_policy(pair, &expert, &occ)
            .expect("deterministic experts are state policies")
            .policy;
        let residual = (0..pair.n_beliefs)
            .map(|b| tv_row(&trainee.row(b), &next.row(b)))
            .fold(0.0, f64::max);
        trainee = next;
        if residual < EXACT_A2D_TV_TOL {
            converged = true;
            break;
        }
    }
    let eval = policy_evaluation(pair, &trainee);
    ExactA2dReport {
        trainee,
        expert_actions,
        outer_iterations,
        converged,
        undisc_return: eval.undisc_return,
        disc_return: eval.disc_return,
        inner_exhaustive,
        evaluations,
    }
}
