//! Closed-form solvers: discounted occupancy, Q/V tables, the log density
//! gradient table, and every policy-gradient formula built on them.
//!
//! For `gamma < 1` the flow systems `(I - gamma P_pi^T) x = b` are square and
//! nonsingular. At `gamma = 1` they lose one rank; the missing equation is
//! supplied as an extra hard row (`sum d = 1`, resp. `E_d[w] = 0`) and the
//! stacked system is solved by least squares.

use alloc::format;
use core::ops::AddAssign;
use nalgebra::{DMatrix, DVector};

use crate::error::{config_err, model_err, LdgError, Result};
use crate::linalg::{solve_least_squares, solve_square};
use crate::mdp::TabularMdp;
use crate::policy::{check_dims, PolicyTable, SoftmaxPolicy};

/// Normalised discounted occupancy `d_gamma(s, a)` and its state marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyTable {
    pub gamma: f64,
    pub d: DVector<f64>,
    pub d_state: DVector<f64>,
    num_actions: usize,
}

impl OccupancyTable {
    pub fn num_pairs(&self) -> usize {
        self.d.len()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn pair(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.num_actions + a]
    }

    /// `max |d - (1-gamma) d_0 pi - gamma P_pi^T d|`.
    pub fn flow_residual(&self, mdp: &TabularMdp, policy: &PolicyTable) -> f64 {
        let p = mdp.pair_chain(policy);
        let start = mdp.initial_pair_dist(policy);
        let r = &self.d - start * (1.0 - self.gamma) - p.transpose() * &self.d * self.gamma;
        r.amax()
    }

    /// Errors unless every pair has positive mass.
    pub fn require_positive(&self) -> Result<()> {
        match self.d.iter().position(|&v| v <= 0.0) {
            Some(i) => Err(model_err!(
                "zero occupancy at pair (s={}, a={}); induced chain is not ergodic at gamma={}",
                i / self.num_actions,
                i % self.num_actions,
                self.gamma
            )),
            None => Ok(()),
        }
    }
}

/// `Q_gamma` and `V_gamma` for a fixed policy, `gamma < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTables {
    pub gamma: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
}

/// Rows are `w(s, a)`, one column per policy parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTable {
    pub gamma: f64,
    pub w: DMatrix<f64>,
}

impl GradTable {
    pub fn zeros(num_pairs: usize, num_params: usize, gamma: f64) -> Self {
        Self { gamma, w: DMatrix::zeros(num_pairs, num_params) }
    }

    pub fn num_pairs(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w.ncols()
    }

    /// `E_{d}[w]`, one entry per parameter.
    pub fn weighted_mean(&self, occupancy: &OccupancyTable) -> DVector<f64> {
        self.w.tr_mul(&occupancy.d)
    }

    /// Largest entry of `d(s',a')(w(s',a') - g(s',a')) - gamma sum d(s,a) P_pi w(s,a)`.
    pub fn flow_residual(&self, mdp: &TabularMdp, policy: &PolicyTable, occupancy: &OccupancyTable) -> f64 {
        let p = mdp.pair_chain(policy);
        let dw = scale_rows(&self.w, &occupancy.d);
        let dg = scale_rows(&policy.score_matrix(), &occupancy.d);
        let r = &dw - dg - p.transpose() * &dw * occupancy.gamma;
        r.amax()
    }

    /// `sum_{s,a} d(s,a) |w(s,a) - other(s,a)|_1`.
    pub fn weighted_l1_distance(&self, other: &GradTable, occupancy: &OccupancyTable) -> f64 {
        weighted_l1(&(&self.w - &other.w), &occupancy.d)
    }
}

pub(crate) fn weighted_l1(diff: &DMatrix<f64>, weights: &DVector<f64>) -> f64 {
    diff.row_iter()
        .zip(weights.iter())
        .map(|(row, w)| w * row.iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

pub(crate) fn scale_rows(m: &DMatrix<f64>, by: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut row, s) in out.row_iter_mut().zip(by.iter()) {
        row *= *s;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    Classical,
    Practical,
    Ldg,
    ResidualCorrected,
}

impl core::fmt::Display for GradientMethod {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Classical => "classical",
            Self::Practical => "practical",
            Self::Ldg => "ldg",
            Self::ResidualCorrected => "residual-corrected",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub grad: DVector<f64>,
    pub method: GradientMethod,
    /// Discount used for `Q`, when the method uses one.
    pub gamma_eval: Option<f64>,
    pub residual_term: Option<DVector<f64>>,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(config_err!("gamma {gamma} outside [0, 1]"));
    }
    Ok(())
}

fn check_gamma_eval(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(config_err!(
            "gamma_eval {gamma} must lie in [0, 1): the Bellman equation has no unique Q at gamma = 1"
        ));
    }
    Ok(())
}

pub fn solve_occupancy(mdp: &TabularMdp, policy: &SoftmaxPolicy, gamma: f64) -> Result<OccupancyTable> {
    check_dims(policy, mdp)?;
    occupancy_for(mdp, &policy.table(), gamma)
}

/// [`solve_occupancy`] on an already-evaluated policy.
pub fn occupancy_for(mdp: &TabularMdp, policy: &PolicyTable, gamma: f64) -> Result<OccupancyTable> {
    check_gamma(gamma)?;
    let sa = mdp.num_pairs();
    let p = mdp.pair_chain(policy);
    let flow = DMatrix::identity(sa, sa) - p.transpose() * gamma;
    let d = if gamma < 1.0 {
        let rhs = mdp.initial_pair_dist(policy) * (1.0 - gamma);
        solve_square(&flow, &DMatrix::from_column_slice(sa, 1, rhs.as_slice()))?.column(0).into_owned()
    } else {
        let mut stacked = flow.insert_row(sa, 1.0);
        stacked.row_mut(sa).fill(1.0);
        let mut rhs = DMatrix::zeros(sa + 1, 1);
        rhs[(sa, 0)] = 1.0;
        solve_least_squares(&stacked, &rhs)?.column(0).into_owned()
    };
    if let Some(i) = d.iter().position(|&v| v < -1e-10) {
        return Err(model_err!("occupancy solve produced negative mass {} at pair {i}", d[i]));
    }
    let d = d.map(|v| v.max(0.0));
    let na = mdp.num_actions();
    let d_state = DVector::from_fn(mdp.num_states(), |s, _| (0..na).map(|a| d[s * na + a]).sum());
    Ok(OccupancyTable { gamma, d, d_state, num_actions: na })
}

pub fn solve_values(mdp: &TabularMdp, policy: &SoftmaxPolicy, gamma_eval: f64) -> Result<ValueTables> {
    check_dims(policy, mdp)?;
    values_for(mdp, &policy.table(), gamma_eval)
}

pub fn values_for(mdp: &TabularMdp, policy: &PolicyTable, gamma_eval: f64) -> Result<ValueTables> {
    check_gamma_eval(gamma_eval)?;
    let sa = mdp.num_pairs();
    let system = DMatrix::identity(sa, sa) - mdp.pair_chain(policy) * gamma_eval;
    let rhs = DMatrix::from_column_slice(sa, 1, mdp.rewards());
    let q = solve_square(&system, &rhs)?.column(0).into_owned();
    let v = policy.average_over_actions(&q);
    Ok(ValueTables { gamma: gamma_eval, q, v })
}

/// Exact `grad_theta log d_gamma(s, a)`.
///
/// Solves `(I - gamma P_pi^T) D W = D G` for `D W`. At `gamma = 1` the
/// zero-mean row `e^T D W = 0` is appended; `lambda` only has to be positive
/// there and is otherwise unused.
pub fn solve_log_density_gradient(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    lambda: f64,
) -> Result<GradTable> {
    check_dims(policy, mdp)?;
    let table = policy.table();
    let occupancy = occupancy_for(mdp, &table, gamma)?;
    log_density_gradient_for(mdp, &table, &occupancy, lambda)
}

pub fn log_density_gradient_for(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    lambda: f64,
) -> Result<GradTable> {
    check_lambda(occupancy.gamma, lambda)?;
    occupancy.require_positive()?;
    let dw = weighted_log_density_gradient(mdp, policy, occupancy)?;
    let w = scale_rows(&dw, &occupancy.d.map(|v| 1.0 / v));
    Ok(GradTable { gamma: occupancy.gamma, w })
}

fn check_lambda(gamma: f64, lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(config_err!("lambda must be a non-negative finite number, got {lambda}"));
    }
    if gamma == 1.0 && lambda <= 0.0 {
        return Err(config_err!("lambda must be positive when gamma = 1"));
    }
    Ok(())
}

/// `D W`, which stays well defined on pairs with zero occupancy when
/// `gamma < 1`.
fn weighted_log_density_gradient(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
) -> Result<DMatrix<f64>> {
    let gamma = occupancy.gamma;
    let sa = mdp.num_pairs();
    let p = mdp.pair_chain(policy);
    let flow = DMatrix::identity(sa, sa) - p.transpose() * gamma;
    let dg = scale_rows(&policy.score_matrix(), &occupancy.d);
    if gamma < 1.0 {
        solve_square(&flow, &dg)
    } else {
        let mut stacked = flow.insert_row(sa, 1.0);
        stacked.row_mut(sa).fill(1.0);
        let rhs = dg.insert_row(sa, 0.0);
        solve_least_squares(&stacked, &rhs)
    }
}

/// `grad_theta log d_gamma(s)`, one row per state.
///
/// Uses the factorisation `w(s,a) = u(s) + score(s,a)`: the row is
/// `sum_a pi(a|s) w(s,a)`, and `w(s,a) - score(s,a)` must agree with it for
/// every action.
pub fn state_log_density_gradient(grad: &GradTable, policy: &PolicyTable) -> Result<DMatrix<f64>> {
    let (ns, na, n) = (policy.num_states(), policy.num_actions(), grad.num_params());
    if grad.num_pairs() != ns * na {
        return Err(config_err!(
            "gradient table has {} rows, policy has {} pairs",
            grad.num_pairs(),
            ns * na
        ));
    }
    let mut out = DMatrix::zeros(ns, n);
    for s in 0..ns {
        for a in 0..na {
            let row = grad.w.row(s * na + a) * policy.prob(s, a);
            out.row_mut(s).add_assign(&row);
        }
    }
    for s in 0..ns {
        let scale = out.row(s).amax().max(1.0);
        for a in 0..na {
            let mut diff = grad.w.row(s * na + a) - out.row(s);
            let (offset, block) = policy.score_block(s, a);
            for (k, v) in block.enumerate() {
                diff[offset + k] -= v;
            }
            if diff.amax() > 1e-6 * scale {
                return Err(LdgError::Numerical(format!(
                    "w(s,a) - score(s,a) differs across actions at s={s} by {:.3e}",
                    diff.amax()
                )));
            }
        }
    }
    Ok(out)
}

/// `sum d_gamma(s,a) Q_gamma(s,a) score(s,a)`, `gamma < 1`.
pub fn exact_policy_gradient_classical(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
) -> Result<GradientReport> {
    check_dims(policy, mdp)?;
    if gamma >= 1.0 {
        return Err(config_err!(
            "classical gradient needs gamma < 1 (got {gamma}); use the log density gradient for gamma = 1"
        ));
    }
    let table = policy.table();
    let occupancy = occupancy_for(mdp, &table, gamma)?;
    let values = values_for(mdp, &table, gamma)?;
    let grad = table.score_matrix().tr_mul(&occupancy.d.component_mul(&values.q));
    Ok(GradientReport { grad, method: GradientMethod::Classical, gamma_eval: Some(gamma), residual_term: None })
}

/// `E_{d_gamma}[grad log d_gamma * r]`, valid for every `gamma` in `[0, 1]`.
///
/// Computed as `(D W)^T r`, so pairs the chain never visits (possible for
/// `gamma < 1` with a concentrated `d_0`) contribute nothing instead of
/// failing.
pub fn exact_policy_gradient_ldg(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    lambda: f64,
) -> Result<GradientReport> {
    check_dims(policy, mdp)?;
    let table = policy.table();
    let occupancy = occupancy_for(mdp, &table, gamma)?;
    check_lambda(gamma, lambda)?;
    let dw = weighted_log_density_gradient(mdp, &table, &occupancy)?;
    let grad = dw.tr_mul(&mdp.reward_vector());
    Ok(GradientReport { grad, method: GradientMethod::Ldg, gamma_eval: None, residual_term: None })
}

/// The actor-critic surrogate `E_{d_1}[Q_gamma * score]` with `gamma < 1`.
pub fn practical_policy_gradient(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma_eval: f64,
) -> Result<GradientReport> {
    check_dims(policy, mdp)?;
    check_gamma_eval(gamma_eval)?;
    let table = policy.table();
    let d1 = occupancy_for(mdp, &table, 1.0)?;
    let values = values_for(mdp, &table, gamma_eval)?;
    let grad = practical_from(&table, &d1, &values);
    Ok(GradientReport { grad, method: GradientMethod::Practical, gamma_eval: Some(gamma_eval), residual_term: None })
}

fn practical_from(table: &PolicyTable, d1: &OccupancyTable, values: &ValueTables) -> DVector<f64> {
    table.score_matrix().tr_mul(&d1.d.component_mul(&values.q))
}

/// Splits the average-reward gradient into the practical estimate plus
/// `(1 - gamma) E_{d_1}[grad log d_1(s) V_gamma(s)]`.
pub fn residual_decomposition(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma_eval: f64,
    lambda: f64,
) -> Result<GradientReport> {
    check_dims(policy, mdp)?;
    check_gamma_eval(gamma_eval)?;
    let table = policy.table();
    let d1 = occupancy_for(mdp, &table, 1.0)?;
    let values = values_for(mdp, &table, gamma_eval)?;
    let w1 = log_density_gradient_for(mdp, &table, &d1, lambda)?;
    let state_grad = state_log_density_gradient(&w1, &table)?;
    let practical = practical_from(&table, &d1, &values);
    let residual = state_grad.tr_mul(&d1.d_state.component_mul(&values.v)) * (1.0 - gamma_eval);
    Ok(GradientReport {
        grad: practical + &residual,
        method: GradientMethod::ResidualCorrected,
        gamma_eval: Some(gamma_eval),
        residual_term: Some(residual),
    })
}

/// `J_gamma = E_{d_gamma}[r]`.
pub fn policy_performance(mdp: &TabularMdp, policy: &SoftmaxPolicy, gamma: f64) -> Result<f64> {
    let occupancy = solve_occupancy(mdp, policy, gamma)?;
    Ok(occupancy.d.dot(&mdp.reward_vector()))
}

impl core::fmt::Display for OccupancyTable {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "OccupancyTable(gamma={}, pairs={})", self.gamma, self.d.len())
    }
}
