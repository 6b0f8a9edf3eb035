#![allow(dead_code)]

use ldg_core::nalgebra::DVector;
use ldg_core::rng::rng_from_seed;
use ldg_core::{PolicyTable, SoftmaxPolicy, TabularMdp};
use rand::Rng;

/// Dense random MDP; every transition entry is positive so the chain is ergodic.
pub fn random_mdp(seed: u64, ns: usize, na: usize, gamma: f64) -> TabularMdp {
    let mut rng = rng_from_seed(seed);
    let mut transition = Vec::with_capacity(ns * na * ns);
    for _ in 0..ns * na {
        let row: Vec<f64> = (0..ns).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = row.iter().sum();
        transition.extend(row.iter().map(|v| v / total));
    }
    let reward = (0..ns * na).map(|_| rng.random_range(-1.0..1.0)).collect();
    let d0: Vec<f64> = (0..ns).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = d0.iter().sum();
    TabularMdp::new(ns, na, transition, reward, d0.iter().map(|v| v / total).collect(), gamma).unwrap()
}

pub fn random_policy(seed: u64, mdp: &TabularMdp) -> SoftmaxPolicy {
    let mut rng = rng_from_seed(seed ^ 0x9e37_79b9_7f4a_7c15);
    let theta = (0..mdp.num_pairs()).map(|_| rng.random_range(-1.5..1.5)).collect();
    SoftmaxPolicy::for_mdp(mdp, theta).unwrap()
}

/// Pair distribution pushed forward one step: `x'(s',a') = sum x(s,a) P(s'|s,a) pi(a'|s')`.
fn push(mdp: &TabularMdp, table: &PolicyTable, x: &[f64]) -> Vec<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut state = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let mass = x[s * na + a];
            if mass != 0.0 {
                for (t, p) in mdp.transition_row(s, a).iter().enumerate() {
                    state[t] += mass * p;
                }
            }
        }
    }
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            out[s * na + a] = state[s] * table.prob(s, a);
        }
    }
    out
}

/// Occupancy by iterating the chain instead of solving a linear system.
/// `gamma < 1` sums the discounted series; `gamma = 1` runs the lazy chain to
/// its fixed point.
pub fn occupancy_by_iteration(mdp: &TabularMdp, table: &PolicyTable, gamma: f64) -> Vec<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut x = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            x[s * na + a] = mdp.initial_dist()[s] * table.prob(s, a);
        }
    }
    if gamma < 1.0 {
        let mut out = vec![0.0; ns * na];
        let mut weight = 1.0 - gamma;
        while weight > 1e-20 {
            out.iter_mut().zip(&x).for_each(|(o, v)| *o += weight * v);
            x = push(mdp, table, &x);
            weight *= gamma;
        }
        out
    } else {
        for _ in 0..2_000_000 {
            let next: Vec<f64> = push(mdp, table, &x).iter().zip(&x).map(|(p, v)| 0.5 * (p + v)).collect();
            let change = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            x = next;
            if change < 1e-16 {
                break;
            }
        }
        x
    }
}

pub fn performance_by_iteration(mdp: &TabularMdp, policy: &SoftmaxPolicy, gamma: f64) -> f64 {
    let d = occupancy_by_iteration(mdp, &policy.table(), gamma);
    d.iter().zip(mdp.rewards()).map(|(d, r)| d * r).sum()
}

/// Central differences of `J_gamma` with step `h`.
pub fn finite_difference_gradient(mdp: &TabularMdp, policy: &SoftmaxPolicy, gamma: f64, h: f64) -> DVector<f64> {
    let theta = policy.theta().to_vec();
    DVector::from_iterator(
        theta.len(),
        (0..theta.len()).map(|k| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += h;
            minus[k] -= h;
            let jp = performance_by_iteration(mdp, &SoftmaxPolicy::for_mdp(mdp, plus).unwrap(), gamma);
            let jm = performance_by_iteration(mdp, &SoftmaxPolicy::for_mdp(mdp, minus).unwrap(), gamma);
            (jp - jm) / (2.0 * h)
        }),
    )
}

pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}
