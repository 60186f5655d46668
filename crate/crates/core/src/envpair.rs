//! MDP-POMDP pairs: two views of one enumerable decision process that share
//! dynamics, rewards, and initial distribution, and differ only in what the
//! policy observes (full state vs. compact observation).
//!
//! Includes the two gridworld families (Frozen Lake and the Tiger Door
//! variants 0-3), a fully-observed Frozen Lake control pair, windowed belief
//! construction, and trajectory sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid side length; all layouts are 5x5.
pub const GRID: usize = 5;
/// Gridworld actions, in index order: north, east, south, west.
pub const ACTION_NAMES: [&str; 4] = ["N", "E", "S", "W"];
const DELTAS: [(i32, i32); 4] = [(0, -1), (1, 0), (0, 1), (-1, 0)];

pub const STEP_REWARD: f64 = -2.0;
pub const GOAL_REWARD: f64 = 20.0;
pub const HAZARD_REWARD: f64 = -100.0;
pub const DEFAULT_GAMMA: f64 = 0.995;
pub const DEFAULT_HORIZON: usize = 200;
pub const DEFAULT_WINDOW: usize = 1;

/// Transition rows must sum to one within this (point masses for gridworlds).
pub const TRANSITION_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PairError {
    #[error("unknown layout `{0}`")]
    UnknownLayout(String),
    #[error("cannot step from terminal state {0}")]
    TerminalStep(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Named layout plus the shared constants of the pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSpec {
    pub layout: String,
    pub gamma: f64,
    pub horizon: usize,
    pub window: usize,
}

impl PairSpec {
    pub fn new(layout: &str) -> Self {
        PairSpec {
            layout: layout.to_string(),
            gamma: DEFAULT_GAMMA,
            horizon: DEFAULT_HORIZON,
            window: DEFAULT_WINDOW,
        }
    }
}

/// Grid metadata kept for rendering and the `env dump` subcommand.
#[derive(Debug, Clone)]
pub struct GridLayout {
    pub start: usize,
    pub goal: Option<usize>,
    pub doors: Option<(usize, usize)>,
    pub button: Option<usize>,
    pub bump_button: bool,
    pub walls: Vec<usize>,
    pub hazard_cells: Vec<usize>,
}

/// An enumerable MDP-POMDP pair. The MDP view context is the state id; the
/// POMDP view is the belief id (window of compact observations). Both views
/// expose the same transitions, rewards, and initial distribution.
#[derive(Debug, Clone)]
pub struct ProcessPair {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_beliefs: usize,
    /// Initial state distribution, length `n_states`.
    pub init: Vec<f64>,
    /// `trans[s * n_actions + a]` = sparse `(next_state, prob)` row.
    pub trans: Vec<Vec<(usize, f64)>>,
    /// Expected immediate reward, indexed `s * n_actions + a`.
    pub rew: Vec<f64>,
    pub terminal: Vec<bool>,
    /// Window-1 belief id of every state (the compact observation id).
    pub belief_of: Vec<usize>,
    /// Compact observation vector per belief id (terminal belief = zeros).
    pub obs_vecs: Vec<Vec<f64>>,
    /// Privileged state vector per state id (terminal = zeros).
    pub state_vecs: Vec<Vec<f64>>,
    pub gamma: f64,
    pub horizon: usize,
    pub layout: Option<GridLayout>,
}

impl ProcessPair {
    pub fn enumerate_states(&self) -> std::ops::Range<usize> {
        0..self.n_states
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init
    }

    /// Initial states with nonzero probability (the hidden configurations).
    pub fn init_support(&self) -> Vec<(usize, f64)> {
        self.init
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(s, p)| (s, *p))
            .collect()
    }

    pub fn transition_probs(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.trans[s * self.n_actions + a]
    }

    /// Reward for the transition (s, a, s'). Rewards here depend only on
    /// (s, a); the s' argument is kept for the general contract.
    pub fn reward(&self, s: usize, a: usize, _s_next: usize) -> f64 {
        self.rew[s * self.n_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn n_nonterminal(&self) -> usize {
        self.terminal.iter().filter(|t| !**t).count()
    }

    /// Window-1 belief id (compact observation id) of a state.
    pub fn belief_id(&self, s: usize) -> usize {
        self.belief_of[s]
    }

    pub fn obs_vec(&self, s: usize) -> &[f64] {
        &self.obs_vecs[self.belief_of[s]]
    }

    pub fn state_vec(&self, s: usize) -> &[f64] {
        &self.state_vecs[s]
    }

    pub fn obs_len(&self) -> usize {
        self.obs_vecs[0].len()
    }

    pub fn state_len(&self) -> usize {
        self.state_vecs[0].len()
    }

    pub fn sample_init<R: Rng>(&self, rng: &mut R) -> usize {
        sample_index(&self.init, rng)
    }

    /// One environment transition. All layout stochasticity lives in the
    /// initial distribution, so gridworld steps are deterministic given
    /// (s, a); generic pairs sample from the transition row.
    pub fn step<R: Rng>(
        &self,
        s: usize,
        a: usize,
        rng: &mut R,
    ) -> Result<(usize, f64, bool), PairError> {
        if self.terminal[s] {
            return Err(PairError::TerminalStep(s));
        }
        let row = self.transition_probs(s, a);
        let s_next = if row.len() == 1 {
            row[0].0
        } else {
            let u: f64 = rng.gen::<f64>();
            let mut acc = 0.0;
            let mut chosen = row[row.len() - 1].0;
            for &(s2, p) in row {
                acc += p;
                if u < acc {
                    chosen = s2;
                    break;
                }
            }
            chosen
        };
        let r = self.reward(s, a, s_next);
        Ok((s_next, r, self.terminal[s_next]))
    }

    /// Number of deterministic state-policies over nonterminal states, if it
    /// fits in a usize (`None` means "too many to enumerate").
    pub fn deterministic_expert_count(&self) -> Option<usize> {
        let mut count: usize = 1;
        for _ in 0..self.n_nonterminal() {
            count = count.checked_mul(self.n_actions)?;
        }
        Some(count)
    }

    pub fn render_ascii(&self) -> String {
        let Some(layout) = &self.layout else {
            return format!("{} ({} states, no grid layout)", self.name, self.n_states);
        };
        let mut out = String::new();
        for y in 0..GRID {
            for x in 0..GRID {
                let pos = y * GRID + x;
                let ch = if layout.walls.contains(&pos) {
                    '#'
                } else if pos == layout.start {
                    'S'
                } else if Some(pos) == layout.goal {
                    'G'
                } else if Some(pos) == layout.button {
                    'B'
                } else if layout.doors.map_or(false, |(a, b)| pos == a || pos == b) {
                    'D'
                } else if layout.hazard_cells.contains(&pos) {
                    'h'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Builds a named pair. Supported layouts: `frozen_lake`,
/// `frozen_lake_observed` (identifiable control), `tiger_door_0` ..
/// `tiger_door_3`.
pub fn make_pair(spec: &PairSpec) -> Result<ProcessPair, PairError> {
    let mut pair = match spec.layout.as_str() {
        "frozen_lake" => frozen_lake(false),
        "frozen_lake_observed" => frozen_lake(true),
        "tiger_door_0" => tiger_door(0),
        "tiger_door_1" => tiger_door(1),
        "tiger_door_2" => tiger_door(2),
        "tiger_door_3" => tiger_door(3),
        other => return Err(PairError::UnknownLayout(other.to_string())),
    };
    pair.gamma = spec.gamma;
    pair.horizon = spec.horizon;
    Ok(pair)
}

pub fn pair_by_name(layout: &str) -> Result<ProcessPair, PairError> {
    make_pair(&PairSpec::new(layout))
}

fn pidx(x: usize, y: usize) -> usize {
    y * GRID + x
}

fn one_hot(len: usize, idx: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[idx] = 1.0;
    v
}

/// Frozen Lake: start (0,2), goal (4,2), one hazard uniformly placed on the
/// nine interior cells. `observed` swaps the position-only observation for
/// the full (position, hazard) observation, making the pair identifiable.
fn frozen_lake(observed: bool) -> ProcessPair {
    let start = pidx(0, 2);
    let goal = pidx(4, 2);
    let hazards: Vec<usize> = (1..4)
        .flat_map(|y| (1..4).map(move |x| pidx(x, y)))
        .collect();
    let n_cfg = hazards.len();
    let n_states = 25 * n_cfg + 1;
    let term_state = n_states - 1;

    let n_beliefs = if observed { 25 * n_cfg + 1 } else { 26 };
    let mut belief_of = vec![0usize; n_states];
    for pos in 0..25 {
        for c in 0..n_cfg {
            belief_of[pos * n_cfg + c] = if observed { pos * n_cfg + c } else { pos };
        }
    }
    belief_of[term_state] = n_beliefs - 1;

    let obs_len = if observed { 25 + n_cfg } else { 25 };
    let mut obs_vecs = vec![vec![0.0; obs_len]; n_beliefs];
    for pos in 0..25 {
        for c in 0..n_cfg {
            let b = belief_of[pos * n_cfg + c];
            let v = &mut obs_vecs[b];
            v[pos] = 1.0;
            if observed {
                v[25 + c] = 1.0;
            }
        }
    }

    let state_len = 25 + n_cfg;
    let mut state_vecs = vec![vec![0.0; state_len]; n_states];
    for pos in 0..25 {
        for c in 0..n_cfg {
            let v = &mut state_vecs[pos * n_cfg + c];
            v[pos] = 1.0;
            v[25 + c] = 1.0;
        }
    }

    let mut trans = vec![Vec::new(); n_states * 4];
    let mut rew = vec![0.0; n_states * 4];
    let mut terminal = vec![false; n_states];
    terminal[term_state] = true;
    for a in 0..4 {
        trans[term_state * 4 + a] = vec![(term_state, 1.0)];
    }
    for pos in 0..25 {
        let (x, y) = (pos % GRID, pos / GRID);
        for c in 0..n_cfg {
            let s = pos * n_cfg + c;
            let hazard = hazards[c];
            for (a, (dx, dy)) in DELTAS.iter().enumerate() {
                let nx = x as i32 + dx;
                let ny = y as i32 + dy;
                let npos = if nx < 0 || nx >= GRID as i32 || ny < 0 || ny >= GRID as i32 {
                    pos
                } else {
                    pidx(nx as usize, ny as usize)
                };
                let mut r = STEP_REWARD;
                let dest = if npos == goal {
                    r += GOAL_REWARD;
                    term_state
                } else if npos == hazard {
                    r += HAZARD_REWARD;
                    term_state
                } else {
                    npos * n_cfg + c
                };
                trans[s * 4 + a] = vec![(dest, 1.0)];
                rew[s * 4 + a] = r;
            }
        }
    }

    let mut init = vec![0.0; n_states];
    for c in 0..n_cfg {
        init[start * n_cfg + c] = 1.0 / n_cfg as f64;
    }

    ProcessPair {
        name: if observed {
            "frozen_lake_observed".into()
        } else {
            "frozen_lake".into()
        },
        n_states,
        n_actions: 4,
        n_beliefs,
        init,
        trans,
        rew,
        terminal,
        belief_of,
        obs_vecs,
        state_vecs,
        gamma: DEFAULT_GAMMA,
        horizon: DEFAULT_HORIZON,
        layout: Some(GridLayout {
            start,
            goal: Some(goal),
            doors: None,
            button: None,
            bump_button: false,
            walls: vec![],
            hazard_cells: hazards,
        }),
    }
}

/// Tiger Door variants. One of two door cells hides the goal, the other the
/// tiger, 50/50; a button reveals the configuration in the observation.
/// Variant 0 (main variant) uses a walk-on button and walls that force the
/// doors to be approached through a junction; variants 1-3 place the doors
/// at distance 1/2/3 from the start with a bump-style button (moving into it
/// stays in place, reveals, and pays the step cost).
fn tiger_door(variant: usize) -> ProcessPair {
    struct L {
        start: (usize, usize),
        doors: [(usize, usize); 2],
        walls: &'static [(usize, usize)],
        button: (usize, usize),
        bump: bool,
    }
    let l = match variant {
        0 => L {
            start: (0, 0),
            doors: [(3, 2), (4, 3)],
            walls: &[(2, 2), (3, 1), (3, 3), (4, 4)],
            button: (0, 1),
            bump: false,
        },
        1 => L {
            start: (2, 2),
            doors: [(1, 2), (3, 2)],
            walls: &[],
            button: (2, 1),
            bump: true,
        },
        2 => L {
            start: (2, 2),
            doors: [(0, 2), (4, 2)],
            walls: &[],
            button: (2, 1),
            bump: true,
        },
        3 => L {
            start: (2, 2),
            doors: [(0, 1), (4, 1)],
            walls: &[],
            button: (2, 1),
            bump: true,
        },
        _ => unreachable!("tiger door variants are 0..=3"),
    };
    let start = pidx(l.start.0, l.start.1);
    let d0 = pidx(l.doors[0].0, l.doors[0].1);
    let d1 = pidx(l.doors[1].0, l.doors[1].1);
    let walls: Vec<usize> = l.walls.iter().map(|&(x, y)| pidx(x, y)).collect();
    let button = pidx(l.button.0, l.button.1);

    // state = (pos*2 + cfg)*2 + revealed, terminal last
    let n_states = 25 * 2 * 2 + 1;
    let term_state = n_states - 1;
    let sid = |pos: usize, c: usize, rev: usize| (pos * 2 + c) * 2 + rev;

    // belief = pos*3 + (0 unrevealed | 1+cfg revealed), terminal last
    let n_beliefs = 25 * 3 + 1;
    let mut belief_of = vec![0usize; n_states];
    for pos in 0..25 {
        for c in 0..2 {
            for rev in 0..2 {
                belief_of[sid(pos, c, rev)] = pos * 3 + if rev == 1 { 1 + c } else { 0 };
            }
        }
    }
    belief_of[term_state] = n_beliefs - 1;

    // observation: position one-hot ++ goal-door one-hot ++ tiger-door
    // one-hot, with both door blocks zero until the button is pressed
    let obs_len = 25 + 2 + 2;
    let mut obs_vecs = vec![vec![0.0; obs_len]; n_beliefs];
    for pos in 0..25 {
        for c in 0..2 {
            for rev in 0..2 {
                let v = &mut obs_vecs[belief_of[sid(pos, c, rev)]];
                v[pos] = 1.0;
                if rev == 1 {
                    v[25 + c] = 1.0;
                    v[27 + (1 - c)] = 1.0;
                }
            }
        }
    }

    let state_len = 25 + 2 + 2 + 1;
    let mut state_vecs = vec![vec![0.0; state_len]; n_states];
    for pos in 0..25 {
        for c in 0..2 {
            for rev in 0..2 {
                let v = &mut state_vecs[sid(pos, c, rev)];
                v[pos] = 1.0;
                v[25 + c] = 1.0;
                v[27 + (1 - c)] = 1.0;
                v[29] = rev as f64;
            }
        }
    }

    let mut trans = vec![Vec::new(); n_states * 4];
    let mut rew = vec![0.0; n_states * 4];
    let mut terminal = vec![false; n_states];
    terminal[term_state] = true;
    for a in 0..4 {
        trans[term_state * 4 + a] = vec![(term_state, 1.0)];
    }
    for pos in 0..25 {
        let (x, y) = (pos % GRID, pos / GRID);
        for c in 0..2 {
            let goal = if c == 0 { d0 } else { d1 };
            let tiger = if c == 0 { d1 } else { d0 };
            for rev in 0..2 {
                let s = sid(pos, c, rev);
                for (a, (dx, dy)) in DELTAS.iter().enumerate() {
                    let nx = x as i32 + dx;
                    let ny = y as i32 + dy;
                    let mut nrev = rev;
                    let npos = if nx < 0 || nx >= GRID as i32 || ny < 0 || ny >= GRID as i32 {
                        pos
                    } else {
                        let cand = pidx(nx as usize, ny as usize);
                        if walls.contains(&cand) {
                            pos
                        } else if l.bump && cand == button {
                            nrev = 1;
                            pos
                        } else {
                            if !l.bump && cand == button {
                                nrev = 1;
                            }
                            cand
                        }
                    };
                    let mut r = STEP_REWARD;
                    let dest = if npos == goal {
                        r += GOAL_REWARD;
                        term_state
                    } else if npos == tiger {
                        r += HAZARD_REWARD;
                        term_state
                    } else {
                        sid(npos, c, nrev)
                    };
                    trans[s * 4 + a] = vec![(dest, 1.0)];
                    rew[s * 4 + a] = r;
                }
            }
        }
    }

    let mut init = vec![0.0; n_states];
    init[sid(start, 0, 0)] = 0.5;
    init[sid(start, 1, 0)] = 0.5;

    ProcessPair {
        name: format!("tiger_door_{variant}"),
        n_states,
        n_actions: 4,
        n_beliefs,
        init,
        trans,
        rew,
        terminal,
        belief_of,
        obs_vecs,
        state_vecs,
        gamma: DEFAULT_GAMMA,
        horizon: DEFAULT_HORIZON,
        layout: Some(GridLayout {
            start,
            goal: None,
            doors: Some((d0, d1)),
            button: Some(button),
            bump_button: l.bump,
            walls,
            hazard_cells: vec![],
        }),
    }
}

/// Builds a pair directly from tables; used for hand-made toys in tests and
/// for randomized pairs. Observation/state vectors default to one-hot ids.
#[allow(clippy::too_many_arguments)]
pub fn pair_from_tables(
    name: &str,
    n_actions: usize,
    init: Vec<f64>,
    trans: Vec<Vec<(usize, f64)>>,
    rew: Vec<f64>,
    terminal: Vec<bool>,
    belief_of: Vec<usize>,
    gamma: f64,
) -> ProcessPair {
    let n_states = terminal.len();
    assert_eq!(trans.len(), n_states * n_actions);
    assert_eq!(rew.len(), n_states * n_actions);
    assert_eq!(belief_of.len(), n_states);
    assert_eq!(init.len(), n_states);
    let n_beliefs = belief_of.iter().copied().max().unwrap_or(0) + 1;
    let obs_vecs = (0..n_beliefs).map(|b| one_hot(n_beliefs, b)).collect();
    let state_vecs = (0..n_states).map(|s| one_hot(n_states, s)).collect();
    ProcessPair {
        name: name.to_string(),
        n_states,
        n_actions,
        n_beliefs,
        init,
        trans,
        rew,
        terminal,
        belief_of,
        obs_vecs,
        state_vecs,
        gamma,
        horizon: DEFAULT_HORIZON,
        layout: None,
    }
}

/// Random small pair with dense stochastic dynamics and an aliasing belief
/// map; no terminal states. Used by randomized property suites.
pub fn random_small_pair<R: Rng>(rng: &mut R) -> ProcessPair {
    let n_states = rng.gen_range(2..=7);
    let n_actions = rng.gen_range(2..=4);
    let n_beliefs = rng.gen_range(1..=n_states);
    // surjective belief map: first n_beliefs states get distinct ids
    let mut belief_of: Vec<usize> = (0..n_states)
        .map(|s| {
            if s < n_beliefs {
                s
            } else {
                rng.gen_range(0..n_beliefs)
            }
        })
        .collect();
    // shuffle so the aliasing pattern is not positional
    for i in (1..n_states).rev() {
        let j = rng.gen_range(0..=i);
        belief_of.swap(i, j);
    }
    // re-canonicalize ids so every id < n_beliefs still appears
    let mut seen = std::collections::HashMap::new();
    for b in belief_of.iter_mut() {
        let next_id = seen.len();
        *b = *seen.entry(*b).or_insert(next_id);
    }

    let mut trans = Vec::with_capacity(n_states * n_actions);
    let mut rew = Vec::with_capacity(n_states * n_actions);
    for _ in 0..n_states {
        for _ in 0..n_actions {
            let mut row: Vec<f64> = (0..n_states).map(|_| -f64::ln(rng.gen::<f64>())).collect();
            let tot: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= tot);
            trans.push(row.iter().enumerate().map(|(s2, p)| (s2, *p)).collect());
            rew.push(rng.gen_range(-1.0..1.0));
        }
    }
    let mut init: Vec<f64> = (0..n_states).map(|_| -f64::ln(rng.gen::<f64>())).collect();
    let tot: f64 = init.iter().sum();
    init.iter_mut().for_each(|p| *p /= tot);

    let gamma = rng.gen_range(0.8..0.99);
    pair_from_tables(
        "random",
        n_actions,
        init,
        trans,
        rew,
        vec![false; n_states],
        belief_of,
        gamma,
    )
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

// ---------------------------------------------------------------------------
// Belief windows
// ---------------------------------------------------------------------------

/// Fixed-length history of the last `window` observations and `window - 1`
/// actions, flattened into one real vector. With the default `window = 1`
/// the belief is exactly the latest compact observation.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefWindow {
    pub window: usize,
    pub obs_len: usize,
    pub n_actions: usize,
    /// Oldest-first observation history, zero-padded before the episode start.
    pub obs_hist: Vec<Vec<f64>>,
    /// Oldest-first action history (`None` = padding), length `window - 1`.
    pub act_hist: Vec<Option<usize>>,
}

/// Flattened length of a [`BeliefWindow`] with the given geometry.
pub fn window_flat_len(window: usize, obs_len: usize, n_actions: usize) -> usize {
    window * obs_len + (window - 1) * n_actions
}

/// Inverse of [`window_flat_len`]: the window size whose flattened belief has
/// this length, if one exists.
pub fn window_from_flat_len(flat_len: usize, obs_len: usize, n_actions: usize) -> Option<usize> {
    let num = flat_len + n_actions;
    let den = obs_len + n_actions;
    if den > 0 && num % den == 0 && num / den >= 1 {
        Some(num / den)
    } else {
        None
    }
}

impl BeliefWindow {
    /// Window at episode start, holding only the initial observation.
    pub fn start(window: usize, n_actions: usize, first_obs: &[f64]) -> Self {
        assert!(window >= 1, "window must be positive");
        let obs_len = first_obs.len();
        let mut obs_hist = vec![vec![0.0; obs_len]; window];
        obs_hist[window - 1] = first_obs.to_vec();
        BeliefWindow {
            window,
            obs_len,
            n_actions,
            obs_hist,
            act_hist: vec![None; window - 1],
        }
    }

    pub fn flat_len(&self) -> usize {
        self.window * self.obs_len + (self.window - 1) * self.n_actions
    }

    /// Flattened vector: observations oldest-first, then one-hot actions
    /// oldest-first (zeros where padded).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        for o in &self.obs_hist {
            v.extend_from_slice(o);
        }
        for a in &self.act_hist {
            let mut oh = vec![0.0; self.n_actions];
            if let Some(a) = a {
                oh[*a] = 1.0;
            }
            v.extend_from_slice(&oh);
        }
        v
    }
}

/// Shifts the window one step: appends the new observation and the action
/// that produced it, dropping the oldest entries. Deterministic.
pub fn belief_update(
    b: &BeliefWindow,
    o_next: &[f64],
    a: usize,
) -> Result<BeliefWindow, PairError> {
    if o_next.len() != b.obs_len {
        return Err(PairError::DimensionMismatch {
            expected: b.obs_len,
            got: o_next.len(),
        });
    }
    let mut next = b.clone();
    next.obs_hist.remove(0);
    next.obs_hist.push(o_next.to_vec());
    if b.window > 1 {
        next.act_hist.remove(0);
        next.act_hist.push(Some(a));
    }
    Ok(next)
}

// ---------------------------------------------------------------------------
// Trajectory sampling
// ---------------------------------------------------------------------------

/// Why a step ended its episode (or did not).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Done {
    No,
    /// Absorbing terminal entered; bootstrap value 0.
    Terminal,
    /// Time limit or batch boundary; bootstrap from the value estimate.
    Truncated,
}

/// One environment interaction with the bookkeeping the estimators need.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub s: usize,
    /// Flattened belief at time t.
    pub b: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub b_next: Vec<f64>,
    pub done: Done,
    pub behavior_logp: f64,
    pub expert_branch: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Episode {
    pub steps: Vec<StepRecord>,
}

impl Episode {
    pub fn ret(&self) -> f64 {
        self.steps.iter().map(|t| t.r).sum()
    }
}

/// Collects exactly `n_steps` interactions across as many episodes as
/// needed. `choose` maps (state, belief window, rng) to an action, the
/// behavior log-density of that action, and whether the expert branch of a
/// mixture was taken (false for pure policies). Episodes are truncated at
/// `pair.horizon`; the final episode may be cut at the batch boundary.
pub fn rollout<R, F>(pair: &ProcessPair, n_steps: usize, window: usize, rng: &mut R, mut choose: F) -> Vec<Episode>
where
    R: Rng,
    F: FnMut(usize, &BeliefWindow, &mut R) -> (usize, f64, bool),
{
    let mut episodes = Vec::new();
    let mut collected = 0;
    while collected < n_steps {
        let mut ep = Episode::default();
        let mut s = pair.sample_init(rng);
        let mut bw = BeliefWindow::start(window, pair.n_actions, pair.obs_vec(s));
        for t in 0..pair.horizon {
            let (a, logp, expert_branch) = choose(s, &bw, rng);
            let (s_next, r, terminal) = pair
                .step(s, a, rng)
                .expect("rollout never steps from a terminal state");
            let bw_next = belief_update(&bw, pair.obs_vec(s_next), a)
                .expect("observation lengths are fixed per pair");
            collected += 1;
            let done = if terminal {
                Done::Terminal
            } else if t + 1 == pair.horizon || collected == n_steps {
                Done::Truncated
            } else {
                Done::No
            };
            ep.steps.push(StepRecord {
                s,
                b: bw.flatten(),
                a,
                r,
                s_next,
                b_next: bw_next.flatten(),
                done,
                behavior_logp: logp,
                expert_branch,
            });
            if done != Done::No {
                break;
            }
            s = s_next;
            bw = bw_next;
        }
        episodes.push(ep);
    }
    episodes
}
