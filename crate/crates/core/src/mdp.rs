//! Finite MDPs and the gridworld benchmark.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, Result};
use crate::policy::PolicyTable;

const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateActionPair {
    pub state: usize,
    pub action: usize,
}

/// One `(s, a, s', a')` draw.
///
/// `restart` marks draws whose successor was not reached through the
/// transition kernel: a reset to `d_0` in the discounted chain, or a
/// non-bootstrapped draw from the backward sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionSample {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
    pub next_action: usize,
    pub restart: bool,
}

impl TransitionSample {
    pub fn pair(&self) -> StateActionPair {
        StateActionPair { state: self.state, action: self.action }
    }

    pub fn next_pair(&self) -> StateActionPair {
        StateActionPair { state: self.next_state, action: self.next_action }
    }
}

/// A finite MDP `(S, A, P, r, gamma, d_0)`.
///
/// State-action pairs are flattened as `s * |A| + a` everywhere in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    /// `transition` is laid out `[s][a][s']`, `reward` as `[s][a]`.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(config_err!("MDP needs at least one state and one action"));
        }
        let sa = num_states * num_actions;
        if transition.len() != sa * num_states {
            return Err(config_err!(
                "transition has {} entries, expected {}",
                transition.len(),
                sa * num_states
            ));
        }
        if reward.len() != sa {
            return Err(config_err!("reward has {} entries, expected {sa}", reward.len()));
        }
        if initial_dist.len() != num_states {
            return Err(config_err!(
                "initial_dist has {} entries, expected {num_states}",
                initial_dist.len()
            ));
        }
        for (i, row) in transition.chunks(num_states).enumerate() {
            check_distribution(row).map_err(|why| {
                config_err!("transition row (s={}, a={}) {why}", i / num_actions, i % num_actions)
            })?;
        }
        check_distribution(&initial_dist).map_err(|why| config_err!("initial_dist {why}"))?;
        if let Some(i) = reward.iter().position(|r| !r.is_finite()) {
            return Err(config_err!("reward for pair {i} is not finite"));
        }
        if !(0.0..=1.0).contains(&discount) {
            return Err(config_err!("discount {discount} outside [0, 1]"));
        }
        Ok(Self { num_states, num_actions, transition, reward, initial_dist, discount })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        debug_assert!(s < self.num_states && a < self.num_actions);
        s * self.num_actions + a
    }

    pub fn pair(&self, index: usize) -> StateActionPair {
        StateActionPair { state: index / self.num_actions, action: index % self.num_actions }
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[self.pair_index(s, a) * self.num_states + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.pair_index(s, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.pair_index(s, a)]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    pub fn reward_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.reward)
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Same dynamics with a different reward table.
    pub fn with_rewards(&self, reward: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            reward,
            self.initial_dist.clone(),
            self.discount,
        )
    }

    pub fn with_initial_dist(&self, initial_dist: Vec<f64>) -> Result<Self> {
        Self::new(
            self.num_states,
            self.num_actions,
            self.transition.clone(),
            self.reward.clone(),
            initial_dist,
            self.discount,
        )
    }

    /// Pair-to-pair kernel `P_pi((s,a),(s',a')) = P(s'|s,a) pi(a'|s')`.
    pub fn pair_chain(&self, policy: &PolicyTable) -> DMatrix<f64> {
        let sa = self.num_pairs();
        let mut p = DMatrix::zeros(sa, sa);
        for i in 0..sa {
            let StateActionPair { state, action } = self.pair(i);
            for (next, &prob) in self.transition_row(state, action).iter().enumerate() {
                if prob == 0.0 {
                    continue;
                }
                for b in 0..self.num_actions {
                    p[(i, self.pair_index(next, b))] = prob * policy.prob(next, b);
                }
            }
        }
        p
    }

    /// `d_0(s) pi(a|s)` over pairs.
    pub fn initial_pair_dist(&self, policy: &PolicyTable) -> DVector<f64> {
        DVector::from_fn(self.num_pairs(), |i, _| {
            let p = self.pair(i);
            self.initial_dist[p.state] * policy.prob(p.state, p.action)
        })
    }

    /// Whether the state graph induced by a full-support policy is strongly
    /// connected.
    pub fn is_irreducible(&self) -> bool {
        let n = self.num_states;
        let mut adj = vec![Vec::new(); n];
        let mut radj = vec![Vec::new(); n];
        for s in 0..n {
            for a in 0..self.num_actions {
                for (t, &p) in self.transition_row(s, a).iter().enumerate() {
                    if p > 0.0 {
                        adj[s].push(t);
                        radj[t].push(s);
                    }
                }
            }
        }
        reaches_all(&adj, n) && reaches_all(&radj, n)
    }
}

fn reaches_all(adj: &[Vec<usize>], n: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|x| x)
}

fn check_distribution(p: &[f64]) -> core::result::Result<(), alloc::string::String> {
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(format!("has invalid probability {} at index {i}", p[i]));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(format!("sums to {sum}, not 1"));
    }
    Ok(())
}

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// `side x side` gridworld.
///
/// Cells are indexed row-major from the top-left start cell. Moves are
/// deterministic and clamp at walls. Every action at the bottom-right goal
/// cell earns reward 1 and teleports to the start, so the chain induced by
/// any full-support policy is recurrent.
pub fn make_gridworld(side: usize) -> Result<TabularMdp> {
    if side < 2 {
        return Err(config_err!("gridworld side must be at least 2, got {side}"));
    }
    let ns = side * side;
    let goal = ns - 1;
    let mut transition = vec![0.0; ns * 4 * ns];
    let mut reward = vec![0.0; ns * 4];
    for s in 0..ns {
        let (row, col) = (s / side, s % side);
        for a in 0..4 {
            let next = if s == goal {
                0
            } else {
                match a {
                    UP => row.saturating_sub(1) * side + col,
                    DOWN => (row + 1).min(side - 1) * side + col,
                    LEFT => row * side + col.saturating_sub(1),
                    _ => row * side + (col + 1).min(side - 1),
                }
            };
            transition[(s * 4 + a) * ns + next] = 1.0;
            if s == goal {
                reward[s * 4 + a] = 1.0;
            }
        }
    }
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    TabularMdp::new(ns, 4, transition, reward, initial, 1.0)
}

/// Resolves named environments; currently only `grid-<side>`.
pub fn mdp_by_name(name: &str) -> Result<TabularMdp> {
    let side = name
        .strip_prefix("grid-")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| config_err!("unknown environment '{name}' (expected grid-<side>)"))?;
    make_gridworld(side)
}
