//! Shared hand-made pairs for integration tests.
#![allow(dead_code)]

use a2d_core::envpair::{pair_from_tables, ProcessPair};

/// Two aliased nonterminal states plus an absorbing state, three actions.
/// Small enough that deterministic experts can be enumerated exhaustively
/// (3^2 = 9).
///
/// dynamics: s0: a0 -> T (+4), a1 -> s1 (0), a2 -> s0 (-1)
///           s1: a0 -> T (-6), a1 -> T (+2), a2 -> s1 (-1)
/// init 50/50 over s0/s1, gamma 0.9, beliefs {s0,s1} -> 0, T -> 1.
pub fn aliased_toy() -> ProcessPair {
    let trans = vec![
        vec![(2, 1.0)], // s0 a0
        vec![(1, 1.0)], // s0 a1
        vec![(0, 1.0)], // s0 a2
        vec![(2, 1.0)], // s1 a0
        vec![(2, 1.0)], // s1 a1
        vec![(1, 1.0)], // s1 a2
        vec![(2, 1.0)],
        vec![(2, 1.0)],
        vec![(2, 1.0)],
    ];
    let rew = vec![4.0, 0.0, -1.0, -6.0, 2.0, -1.0, 0.0, 0.0, 0.0];
    pair_from_tables(
        "aliased_toy",
        3,
        vec![0.5, 0.5, 0.0],
        trans,
        rew,
        vec![false, false, true],
        vec![0, 0, 1],
        0.9,
    )
}

/// A gate state routes to one of two aliased states; the belief-model
/// planner's frozen reference weights claim value at the aliased belief that
/// the committed policy cannot realize, so the planner's consistency check
/// must reject this pair.
///
/// order: 0 = s_a, 1 = s_b, 2 = gate, 3 = T; two actions.
/// gate: a0 -> s_a, a1 -> s_b (0 reward)
/// s_a: a0 -> T (+10), a1 -> T (0)
/// s_b: a0 -> T (-10), a1 -> T (+1)
pub fn gate_aliased_pair() -> ProcessPair {
    let trans = vec![
        vec![(3, 1.0)], // s_a a0
        vec![(3, 1.0)], // s_a a1
        vec![(3, 1.0)], // s_b a0
        vec![(3, 1.0)], // s_b a1
        vec![(0, 1.0)], // gate a0
        vec![(1, 1.0)], // gate a1
        vec![(3, 1.0)],
        vec![(3, 1.0)],
    ];
    let rew = vec![10.0, 0.0, -10.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    pair_from_tables(
        "gate_aliased",
        2,
        vec![0.0, 0.0, 1.0, 0.0],
        trans,
        rew,
        vec![false, false, false, true],
        vec![0, 0, 1, 2],
        0.9,
    )
}

/// Deterministic two-state chain with one action: s0 -> s1 -> s1.
pub fn two_state_chain(gamma: f64) -> ProcessPair {
    pair_from_tables(
        "two_state_chain",
        1,
        vec![1.0, 0.0],
        vec![vec![(1, 1.0)], vec![(1, 1.0)]],
        vec![0.0, 0.0],
        vec![false, false],
        vec![0, 1],
        gamma,
    )
}

/// Single absorbing state.
pub fn absorbing_point(gamma: f64) -> ProcessPair {
    pair_from_tables(
        "absorbing_point",
        1,
        vec![1.0],
        vec![vec![(0, 1.0)]],
        vec![0.0],
        vec![true],
        vec![0],
        gamma,
    )
}
