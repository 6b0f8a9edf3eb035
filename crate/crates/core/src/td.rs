//! Temporal-difference estimators of the log density gradient.
//!
//! Tabular TD(0) tracks `w(s', a')` backwards along the chain with draws
//! from [`BackwardSampler`]; its expected update is `Y_gamma w - w` where
//! `Y_gamma W = gamma D^{-1} P_pi^T D W + G`. Linear TD runs forward samples
//! through a feature map.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{config_err, LdgError, Result};
use crate::exact::{occupancy_for, scale_rows, weighted_l1, GradTable, OccupancyTable};
use crate::features::FeatureMap;
use crate::linalg::solve_square;
use crate::mdp::{TabularMdp, TransitionSample};
use crate::policy::{check_dims, PolicyTable, SoftmaxPolicy};
use crate::sampling::BackwardSampler;

/// `Y_gamma W`, computed exactly.
pub fn apply_operator_y(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    w: &GradTable,
) -> Result<GradTable> {
    occupancy.require_positive()?;
    check_table(w, mdp.num_pairs())?;
    let p = mdp.pair_chain(policy);
    let back = p.tr_mul(&scale_rows(&w.w, &occupancy.d)) * occupancy.gamma;
    let w = scale_rows(&back, &occupancy.d.map(|v| 1.0 / v)) + policy.score_matrix();
    Ok(GradTable { gamma: occupancy.gamma, w })
}

/// `iterations` applications of `Y_gamma`, starting from `W = 0`.
pub fn power_iteration(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    iterations: usize,
) -> Result<GradTable> {
    let mut w = GradTable::zeros(mdp.num_pairs(), policy.num_params(), occupancy.gamma);
    for _ in 0..iterations {
        w = apply_operator_y(mdp, policy, occupancy, &w)?;
    }
    Ok(w)
}

fn check_table(w: &GradTable, num_pairs: usize) -> Result<()> {
    if w.num_pairs() != num_pairs {
        return Err(config_err!("table has {} rows, expected {num_pairs}", w.num_pairs()));
    }
    Ok(())
}

/// Step sizes indexed from `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// `a / (b + t)`.
    RobbinsMonro { a: f64, b: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::RobbinsMonro { a: 1.0, b: 100.0 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant(c) => c.is_finite() && c >= 0.0,
            Schedule::RobbinsMonro { a, b } => a.is_finite() && b.is_finite() && a > 0.0 && b >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(config_err!("invalid step schedule {self:?}"))
        }
    }

    pub fn rate(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant(c) => c,
            Schedule::RobbinsMonro { a, b } => a / (b + t as f64),
        }
    }
}

/// One backward TD(0) update on row `(s', a')` of `w`.
///
/// The target is `w(s, a) + g(s', a')` when `bootstrap` is set and
/// `g(s', a')` otherwise.
pub fn td0_update(w: &mut DMatrix<f64>, policy: &PolicyTable, sample: &TransitionSample, bootstrap: bool, alpha: f64) {
    let na = policy.num_actions();
    let i = sample.state * na + sample.action;
    let j = sample.next_state * na + sample.next_action;
    let n = w.ncols();
    let (offset, block) = policy.score_block(sample.next_state, sample.next_action);
    let mut target = alloc::vec![0.0; n];
    if bootstrap {
        for (k, t) in target.iter_mut().enumerate() {
            *t = w[(i, k)];
        }
    }
    for (k, g) in block.enumerate() {
        target[offset + k] += g;
    }
    for (k, t) in target.into_iter().enumerate() {
        w[(j, k)] += alpha * (t - w[(j, k)]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdState {
    pub w: GradTable,
    pub step_count: u64,
    pub schedule: Schedule,
}

impl TdState {
    pub fn new(num_pairs: usize, num_params: usize, gamma: f64, schedule: Schedule) -> Result<Self> {
        schedule.validate()?;
        Ok(Self { w: GradTable::zeros(num_pairs, num_params, gamma), step_count: 0, schedule })
    }

    pub fn step(&mut self, policy: &PolicyTable, sample: &TransitionSample, bootstrap: bool) {
        self.step_count += 1;
        let alpha = self.schedule.rate(self.step_count);
        td0_update(&mut self.w.w, policy, sample, bootstrap, alpha);
    }
}

/// Runs backward TD(0) from `W = 0`.
///
/// At `gamma = 1` the backup only fixes `W` up to an additive constant per
/// column; the result is projected onto `E_d[w] = 0`.
pub fn run_td0<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    iterations: u64,
    schedule: Schedule,
    rng: &mut R,
) -> Result<GradTable> {
    run_td0_observed(mdp, policy, gamma, iterations, schedule, rng, 0, |_, _| {})
}

/// [`run_td0`] calling `observe(t, w)` every `stride` steps (never when
/// `stride == 0`). Observed tables are not centred.
#[allow(clippy::too_many_arguments)]
pub fn run_td0_observed<R: Rng + ?Sized, F: FnMut(u64, &GradTable)>(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    iterations: u64,
    schedule: Schedule,
    rng: &mut R,
    stride: u64,
    mut observe: F,
) -> Result<GradTable> {
    check_dims(policy, mdp)?;
    if iterations == 0 {
        return Err(config_err!("iterations must be at least 1"));
    }
    let table = policy.table();
    let occupancy = occupancy_for(mdp, &table, gamma)?;
    let sampler = BackwardSampler::new(mdp, &table, &occupancy)?;
    let mut state = TdState::new(mdp.num_pairs(), policy.num_params(), gamma, schedule)?;
    for t in 1..=iterations {
        let (sample, active) = sampler.sample(rng);
        state.step(&table, &sample, active);
        if stride > 0 && t % stride == 0 {
            observe(t, &state.w);
        }
    }
    let mut w = state.w;
    if gamma == 1.0 {
        center(&mut w, &occupancy);
    }
    Ok(w)
}

/// Subtracts `E_d[w]` from every row.
pub fn center(w: &mut GradTable, occupancy: &OccupancyTable) {
    let mean = w.weighted_mean(occupancy);
    for mut row in w.w.row_iter_mut() {
        row -= mean.transpose();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContractionKind {
    /// `gamma < 1`: factor `gamma`.
    Contraction,
    /// `gamma = 1`: factor 1.
    NonExpansion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionDiagnostic {
    pub lhs: f64,
    pub rhs: f64,
    pub kind: ContractionKind,
    pub holds: bool,
}

/// `lhs = |Yu - Yv|_{1,d}` against `rhs = gamma |u - v|_{1,d}`.
pub fn contraction_diagnostic(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    u: &GradTable,
    v: &GradTable,
) -> Result<ContractionDiagnostic> {
    let yu = apply_operator_y(mdp, policy, occupancy, u)?;
    let yv = apply_operator_y(mdp, policy, occupancy, v)?;
    let lhs = yu.weighted_l1_distance(&yv, occupancy);
    let rhs = occupancy.gamma * u.weighted_l1_distance(v, occupancy);
    let kind = if occupancy.gamma < 1.0 { ContractionKind::Contraction } else { ContractionKind::NonExpansion };
    Ok(ContractionDiagnostic { lhs, rhs, kind, holds: lhs <= rhs + 1e-10 })
}

/// Linear TD iterate `zeta` (`d_f x n`), `w(s,a) ~ zeta^T Phi(s,a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTdState {
    pub zeta: DMatrix<f64>,
    pub features: FeatureMap,
    pub gamma: f64,
}

impl LinearTdState {
    pub fn new(features: FeatureMap, num_params: usize, gamma: f64) -> Self {
        Self { zeta: DMatrix::zeros(features.dim(), num_params), features, gamma }
    }

    /// `zeta += alpha Phi' (gamma zeta^T Phi + g' - zeta^T Phi')^T` on a
    /// forward sample.
    pub fn step(&mut self, policy: &PolicyTable, sample: &TransitionSample, alpha: f64) -> Result<()> {
        let na = policy.num_actions();
        let (i, j) = (sample.state * na + sample.action, sample.next_state * na + sample.next_action);
        let (df, n) = self.zeta.shape();
        if df != self.features.dim() || n != policy.num_params() {
            return Err(config_err!(
                "zeta is {df}x{n}, features have dimension {} and the policy {} parameters",
                self.features.dim(),
                policy.num_params()
            ));
        }
        if i.max(j) >= self.features.num_pairs() {
            return Err(config_err!("sample pair outside the feature map"));
        }
        let mut err = alloc::vec![0.0; n];
        for &(k, v) in self.features.sparse(i) {
            for (c, e) in err.iter_mut().enumerate() {
                *e += self.gamma * v * self.zeta[(k, c)];
            }
        }
        for &(k, v) in self.features.sparse(j) {
            for (c, e) in err.iter_mut().enumerate() {
                *e -= v * self.zeta[(k, c)];
            }
        }
        policy.add_score(sample.next_state, sample.next_action, 1.0, &mut err);
        for &(k, v) in self.features.sparse(j) {
            for (c, e) in err.iter().enumerate() {
                self.zeta[(k, c)] += alpha * v * e;
            }
        }
        Ok(())
    }

    pub fn table(&self) -> GradTable {
        GradTable { gamma: self.gamma, w: self.features.evaluate(&self.zeta) }
    }
}

/// Free-function form of [`LinearTdState::step`].
pub fn linear_td_step(
    state: &mut LinearTdState,
    policy: &PolicyTable,
    sample: &TransitionSample,
    alpha: f64,
) -> Result<()> {
    state.step(policy, sample, alpha)
}

/// Mean dynamics of linear TD: `E[update] / alpha = A zeta + g`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTdSystem {
    pub a: DMatrix<f64>,
    pub g: DMatrix<f64>,
}

impl LinearTdSystem {
    /// Solves `A zeta + g = 0`.
    pub fn fixed_point(&self) -> Result<DMatrix<f64>> {
        solve_square(&self.a, &(-&self.g)).map_err(|e| match e {
            LdgError::Model(msg) => LdgError::Assumption(alloc::format!("linear TD matrix A is singular: {msg}")),
            other => other,
        })
    }
}

/// `A = E[Phi' (gamma Phi - Phi')^T]`, `g = E[Phi' score(s',a')^T]` under
/// `(s,a) ~ d`, `s' ~ P`, `a' ~ pi`.
pub fn assemble_linear_td_system(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    features: &FeatureMap,
) -> Result<LinearTdSystem> {
    features.check_pairs(mdp.num_pairs())?;
    let psi = features.psi();
    let p = mdp.pair_chain(policy);
    let mu = p.tr_mul(&occupancy.d);
    let psi_mu = scale_rows(&psi.transpose(), &mu);
    let a = psi * p.tr_mul(&scale_rows(&psi.transpose(), &occupancy.d)) * occupancy.gamma - psi * &psi_mu;
    let g = psi * scale_rows(&policy.score_matrix(), &mu);
    Ok(LinearTdSystem { a, g })
}

/// `sum d |a - b|` between two tables; shorthand for learning curves.
pub fn weighted_l1_error(estimate: &GradTable, exact: &GradTable, occupancy: &OccupancyTable) -> f64 {
    weighted_l1(&(&estimate.w - &exact.w), &occupancy.d)
}
