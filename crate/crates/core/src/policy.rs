//! Tabular softmax policies and their score function.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, Result};
use crate::mdp::TabularMdp;

/// Softmax over per-pair logits: `pi(a|s) = exp(theta[s,a]) / sum_b exp(theta[s,b])`.
///
/// Parameters are indexed like state-action pairs, so `n = |S||A|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    num_states: usize,
    num_actions: usize,
    theta: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(num_states: usize, num_actions: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != num_states * num_actions {
            return Err(config_err!(
                "theta has {} entries, expected {}",
                theta.len(),
                num_states * num_actions
            ));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(config_err!("theta contains non-finite entries"));
        }
        Ok(Self { num_states, num_actions, theta })
    }

    /// Uniform policy (all logits zero).
    pub fn uniform(mdp: &TabularMdp) -> Self {
        Self {
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            theta: vec![0.0; mdp.num_pairs()],
        }
    }

    pub fn for_mdp(mdp: &TabularMdp, theta: Vec<f64>) -> Result<Self> {
        Self::new(mdp.num_states(), mdp.num_actions(), theta)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `theta += step * direction`.
    pub fn ascend(&mut self, direction: &[f64], step: f64) {
        assert_eq!(direction.len(), self.theta.len());
        for (t, d) in self.theta.iter_mut().zip(direction) {
            *t += step * d;
        }
    }

    pub fn table(&self) -> PolicyTable {
        let na = self.num_actions;
        let mut probs = vec![0.0; self.theta.len()];
        for (logits, out) in self.theta.chunks(na).zip(probs.chunks_mut(na)) {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &l) in out.iter_mut().zip(logits) {
                *o = libm::exp(l - max);
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
        PolicyTable { num_states: self.num_states, num_actions: na, probs }
    }

    /// Dense `grad_theta log pi(a|s)`.
    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        self.table().score(s, a)
    }
}

/// Evaluated action probabilities `pi(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_params(&self) -> usize {
        self.probs.len()
    }

    /// Nonzero block of the score: entries `(s, b)` equal `1{b = a} - pi(b|s)`.
    /// Returns the offset of the block in parameter space and its values.
    pub fn score_block(&self, s: usize, a: usize) -> (usize, impl Iterator<Item = f64> + '_) {
        let offset = s * self.num_actions;
        (offset, self.row(s).iter().enumerate().map(move |(b, p)| if b == a { 1.0 - p } else { -p }))
    }

    pub fn score(&self, s: usize, a: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_params()];
        self.add_score(s, a, 1.0, &mut out);
        out
    }

    /// `out += scale * score(s, a)` without materialising the dense score.
    pub fn add_score(&self, s: usize, a: usize, scale: f64, out: &mut [f64]) {
        let (offset, block) = self.score_block(s, a);
        for (o, v) in out[offset..offset + self.num_actions].iter_mut().zip(block) {
            *o += scale * v;
        }
    }

    /// Matrix whose row `(s,a)` is `score(s, a)`; shape `|S||A| x n`.
    pub fn score_matrix(&self) -> DMatrix<f64> {
        let n = self.num_params();
        let mut g = DMatrix::zeros(n, n);
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let (offset, block) = self.score_block(s, a);
                for (k, v) in block.enumerate() {
                    g[(s * self.num_actions + a, offset + k)] = v;
                }
            }
        }
        g
    }

    /// `v(s) = sum_a pi(a|s) q(s,a)`.
    pub fn average_over_actions(&self, q: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.num_states, |s, _| {
            self.row(s).iter().enumerate().map(|(a, p)| p * q[s * self.num_actions + a]).sum()
        })
    }
}

/// `pi(a|s)` for `policy` on `mdp`, checking the dimensions agree.
pub fn policy_probs(policy: &SoftmaxPolicy, mdp: &TabularMdp) -> Result<PolicyTable> {
    check_dims(policy, mdp)?;
    Ok(policy.table())
}

pub(crate) fn check_dims(policy: &SoftmaxPolicy, mdp: &TabularMdp) -> Result<()> {
    if policy.num_states != mdp.num_states() || policy.num_actions != mdp.num_actions() {
        return Err(config_err!(
            "policy is {}x{} but MDP is {}x{}",
            policy.num_states,
            policy.num_actions,
            mdp.num_states(),
            mdp.num_actions()
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::LdgError;
    use crate::mdp::make_gridworld;

    fn bandit_policy(theta: Vec<f64>) -> SoftmaxPolicy {
        SoftmaxPolicy::new(1, 2, theta).unwrap()
    }

    #[test]
    fn single_action_has_probability_one_and_zero_score() {
        let p = SoftmaxPolicy::new(3, 1, vec![0.3, -2.0, 7.0]).unwrap();
        let t = p.table();
        for s in 0..3 {
            assert_eq!(t.prob(s, 0), 1.0);
            assert!(p.score(s, 0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn symmetric_bandit() {
        let p = bandit_policy(vec![0.0, 0.0]);
        assert_eq!(p.table().row(0), &[0.5, 0.5]);
        assert_eq!(p.score(0, 0), vec![0.5, -0.5]);
    }

    #[test]
    fn ln3_logit_gives_three_to_one() {
        let p = bandit_policy(vec![libm::log(3.0), 0.0]);
        let t = p.table();
        // normalisation oracle: exp(ln 3) / (exp(ln 3) + exp(0))
        let z = 3.0 + 1.0;
        assert!((t.prob(0, 0) - 3.0 / z).abs() < 1e-15);
        assert!((t.prob(0, 1) - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn huge_logits_stay_finite() {
        let t = bandit_policy(vec![800.0, 0.0]).table();
        assert!(t.probs().iter().all(|p| p.is_finite()));
        assert!((t.prob(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let m = make_gridworld(2).unwrap();
        let p = bandit_policy(vec![0.0, 0.0]);
        assert!(matches!(policy_probs(&p, &m), Err(LdgError::Config(_))));
        assert!(SoftmaxPolicy::new(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn score_matrix_rows_match_dense_score() {
        let p = SoftmaxPolicy::new(2, 3, vec![0.1, -0.4, 1.0, 0.0, 2.0, -1.0]).unwrap();
        let t = p.table();
        let g = t.score_matrix();
        for s in 0..2 {
            for a in 0..3 {
                let dense = t.score(s, a);
                for k in 0..6 {
                    assert_eq!(g[(s * 3 + a, k)], dense[k]);
                }
            }
        }
    }
}
