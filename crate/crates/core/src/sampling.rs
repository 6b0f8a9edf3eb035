//! On-policy trajectories, occupancy draws and backward draws.

use alloc::vec::Vec;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{config_err, model_err, LdgError, Result};
use crate::exact::OccupancyTable;
use crate::mdp::{TabularMdp, TransitionSample};
use crate::policy::{check_dims, PolicyTable, SoftmaxPolicy};
use crate::rng::uniform;

fn categorical(weights: &[f64], what: &str) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(weights.iter().copied()).map_err(|e| model_err!("cannot sample {what}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
}

/// Categorical tables for `d_0`, `P(.|s,a)` and `pi(.|s)`.
#[derive(Debug, Clone)]
pub struct ChainTables {
    num_actions: usize,
    initial: WeightedIndex<f64>,
    next_state: Vec<WeightedIndex<f64>>,
    action: Vec<WeightedIndex<f64>>,
    rewards: Vec<f64>,
}

impl ChainTables {
    pub fn new(mdp: &TabularMdp, policy: &PolicyTable) -> Result<Self> {
        let na = mdp.num_actions();
        let next_state = (0..mdp.num_pairs())
            .map(|i| {
                let p = mdp.pair(i);
                categorical(mdp.transition_row(p.state, p.action), "transition row")
            })
            .collect::<Result<_>>()?;
        let action = (0..mdp.num_states())
            .map(|s| categorical(policy.row(s), "policy row"))
            .collect::<Result<_>>()?;
        Ok(Self {
            num_actions: na,
            initial: categorical(mdp.initial_dist(), "initial distribution")?,
            next_state,
            action,
            rewards: mdp.rewards().to_vec(),
        })
    }

    pub fn start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.initial.sample(rng)
    }

    pub fn act<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        self.action[s].sample(rng)
    }

    pub fn next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        self.next_state[s * self.num_actions + a].sample(rng)
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    /// `s_0 ~ d_0`, `a_t ~ pi(.|s_t)`, `s_{t+1} ~ P(.|s_t, a_t)`.
    pub fn trajectory<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> Vec<Step> {
        let mut out = Vec::with_capacity(horizon);
        let mut s = self.start(rng);
        for t in 0..horizon {
            let a = self.act(s, rng);
            out.push(Step { state: s, action: a, reward: self.reward(s, a) });
            if t + 1 < horizon {
                s = self.next(s, a, rng);
            }
        }
        out
    }

    fn forward<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> TransitionSample {
        let next_state = self.next(s, a, rng);
        let next_action = self.act(next_state, rng);
        TransitionSample { state: s, action: a, next_state, next_action, restart: false }
    }
}

pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<Step>> {
    check_dims(policy, mdp)?;
    if horizon == 0 {
        return Err(config_err!("horizon must be at least 1"));
    }
    Ok(ChainTables::new(mdp, &policy.table())?.trajectory(horizon, rng))
}

#[derive(Debug, Clone)]
enum Mode {
    Exact { pairs: WeightedIndex<f64> },
    Trajectory { gamma: f64, burn_in: usize, current: Option<(usize, usize)> },
}

/// Draws `(s, a) ~ d_gamma`, `s' ~ P(.|s,a)`, `a' ~ pi(.|s')`.
///
/// Exact mode samples `(s, a)` i.i.d. from a solved occupancy table.
/// Trajectory mode runs the restart chain: after each draw the chain moves
/// to `(s', a')` with probability `gamma` and resets to `d_0 pi` otherwise
/// (flagged by `restart`); its stationary law is `d_gamma`. At `gamma = 1`
/// it is the plain on-policy chain, started after `burn_in` steps.
#[derive(Debug, Clone)]
pub struct OccupancySampler {
    chain: ChainTables,
    mode: Mode,
}

impl OccupancySampler {
    pub fn exact(mdp: &TabularMdp, policy: &PolicyTable, occupancy: &OccupancyTable) -> Result<Self> {
        if occupancy.num_pairs() != mdp.num_pairs() {
            return Err(LdgError::State(alloc::format!(
                "occupancy has {} pairs but the MDP has {}; solve it for this MDP first",
                occupancy.num_pairs(),
                mdp.num_pairs()
            )));
        }
        Ok(Self {
            chain: ChainTables::new(mdp, policy)?,
            mode: Mode::Exact { pairs: categorical(occupancy.d.as_slice(), "occupancy")? },
        })
    }

    pub fn trajectory(mdp: &TabularMdp, policy: &PolicyTable, gamma: f64, burn_in: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(config_err!("gamma {gamma} outside [0, 1]"));
        }
        Ok(Self { chain: ChainTables::new(mdp, policy)?, mode: Mode::Trajectory { gamma, burn_in, current: None } })
    }

    pub fn chain(&self) -> &ChainTables {
        &self.chain
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> TransitionSample {
        let na = self.chain.num_actions;
        match &mut self.mode {
            Mode::Exact { pairs } => {
                let i = pairs.sample(rng);
                self.chain.forward(i / na, i % na, rng)
            }
            Mode::Trajectory { gamma, burn_in, current } => {
                let gamma = *gamma;
                let (s, a) = match *current {
                    Some(pair) => pair,
                    None => {
                        let s = self.chain.start(rng);
                        let mut pair = (s, self.chain.act(s, rng));
                        for _ in 0..*burn_in {
                            pair = advance(&self.chain, pair, gamma, rng).0;
                        }
                        pair
                    }
                };
                let mut sample = self.chain.forward(s, a, rng);
                let (next, restarted) = if gamma < 1.0 && uniform(rng) >= gamma {
                    let s0 = self.chain.start(rng);
                    ((s0, self.chain.act(s0, rng)), true)
                } else {
                    ((sample.next_state, sample.next_action), false)
                };
                sample.restart = restarted;
                *current = Some(next);
                sample
            }
        }
    }
}

fn advance<R: Rng + ?Sized>(chain: &ChainTables, (s, a): (usize, usize), gamma: f64, rng: &mut R) -> ((usize, usize), bool) {
    if gamma < 1.0 && uniform(rng) >= gamma {
        let s0 = chain.start(rng);
        return ((s0, chain.act(s0, rng)), true);
    }
    let next = chain.next(s, a, rng);
    ((next, chain.act(next, rng)), false)
}

/// Backward draws for TD(0).
///
/// `(s', a') ~ d_gamma`; then with probability
/// `M(s',a') = 1 - (1-gamma) d_0(s') pi(a'|s') / d_gamma(s',a')` a predecessor
/// `(s, a)` is drawn from `d(s,a) P(s'|s,a) pi(a'|s')` (normalised) and the
/// draw bootstraps. `gamma * P_b` has total mass exactly `M`, so the gated
/// target `1{boot} w(s,a) + g(s',a')` has mean `(Y_gamma w)(s',a')`.
#[derive(Debug, Clone)]
pub struct BackwardSampler {
    num_actions: usize,
    successors: WeightedIndex<f64>,
    mass: Vec<f64>,
    kernels: Vec<Option<WeightedIndex<f64>>>,
}

impl BackwardSampler {
    pub fn new(mdp: &TabularMdp, policy: &PolicyTable, occupancy: &OccupancyTable) -> Result<Self> {
        occupancy.require_positive()?;
        let sa = mdp.num_pairs();
        let gamma = occupancy.gamma;
        let p = mdp.pair_chain(policy);
        let start = mdp.initial_pair_dist(policy);
        let mut mass = Vec::with_capacity(sa);
        let mut kernels = Vec::with_capacity(sa);
        for j in 0..sa {
            let weights: Vec<f64> = (0..sa).map(|i| occupancy.d[i] * p[(i, j)]).collect();
            let m = (1.0 - (1.0 - gamma) * start[j] / occupancy.d[j]).clamp(0.0, 1.0);
            let kernel = if weights.iter().any(|&w| w > 0.0) { Some(categorical(&weights, "backward kernel")?) } else { None };
            mass.push(if kernel.is_some() { m } else { 0.0 });
            kernels.push(kernel);
        }
        Ok(Self {
            num_actions: mdp.num_actions(),
            successors: categorical(occupancy.d.as_slice(), "occupancy")?,
            mass,
            kernels,
        })
    }

    /// Bootstrap probability `M(s', a')`.
    pub fn mass(&self, pair_index: usize) -> f64 {
        self.mass[pair_index]
    }

    /// A fresh `(s', a') ~ d_gamma` index.
    pub fn successor<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.successors.sample(rng)
    }

    /// Returns the draw and whether it bootstraps. Non-bootstrapped draws
    /// carry `(s, a) = (s', a')` and `restart = true`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (TransitionSample, bool) {
        let na = self.num_actions;
        let j = self.successors.sample(rng);
        let (ns, nact) = (j / na, j % na);
        let active = self.mass[j] > 0.0 && uniform(rng) < self.mass[j];
        let i = match (&self.kernels[j], active) {
            (Some(k), true) => k.sample(rng),
            _ => j,
        };
        let sample = TransitionSample { state: i / na, action: i % na, next_state: ns, next_action: nact, restart: !active };
        (sample, active)
    }
}
