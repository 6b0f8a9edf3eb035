//! Saddle-point estimation of the log density gradient.
//!
//! With `w = alpha^T Phi`, `f = beta^T Phi` and `tau` in `R^n` the loss is
//!
//! ```text
//! L = E_d[f.w] - E_d[f.g] - gamma E[f(s',a').w(s,a)] - 1/2 E_d[|f|^2]
//!     + lambda (tau.E_d[w] - 1/2 |tau|^2)
//!   = <beta, A^T alpha> - <beta, B> - 1/2 <beta, C beta>
//!     + lambda tau^T alpha^T m - lambda/2 |tau|^2
//! ```
//!
//! with `A = Psi D (I - gamma P) Psi^T`, `B = Psi D G`, `C = Psi D Psi^T`,
//! `m = Psi D e`. The stochastic updates descend in `alpha` and ascend in
//! `(beta, tau)` along unbiased single-sample gradients of `L`.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{config_err, LdgError, Result};
use crate::exact::{occupancy_for, scale_rows, GradTable, OccupancyTable};
use crate::features::FeatureMap;
use crate::linalg::solve_square;
use crate::mdp::{StateActionPair, TabularMdp, TransitionSample};
use crate::policy::{check_dims, PolicyTable, SoftmaxPolicy};
use crate::sampling::OccupancySampler;

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(config_err!("lambda must be a non-negative finite number, got {lambda}"));
    }
    Ok(())
}

/// Per-pair flow residual `nu(s',a') = d(s',a')(w - g)(s',a') - gamma sum d P w`.
fn flow_residual_rows(mdp: &TabularMdp, policy: &PolicyTable, occupancy: &OccupancyTable, w: &DMatrix<f64>) -> DMatrix<f64> {
    let dw = scale_rows(w, &occupancy.d);
    let dg = scale_rows(&policy.score_matrix(), &occupancy.d);
    dw - dg - mdp.pair_chain(policy).tr_mul(&scale_rows(w, &occupancy.d)) * occupancy.gamma
}

/// `L(w, f, tau)` by direct summation over pairs and transitions.
pub fn loss_l(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    w: &DMatrix<f64>,
    f: &DMatrix<f64>,
    tau: &DVector<f64>,
    lambda: f64,
) -> Result<f64> {
    let sa = mdp.num_pairs();
    let n = policy.num_params();
    if w.shape() != (sa, n) || f.shape() != (sa, n) || tau.len() != n {
        return Err(config_err!("w and f must be {sa}x{n} and tau of length {n}"));
    }
    let na = mdp.num_actions();
    let d = &occupancy.d;
    let g = policy.score_matrix();
    let mut total = 0.0;
    for i in 0..sa {
        let (fi, wi) = (f.row(i), w.row(i));
        total += d[i] * (fi.dot(&wi) - fi.dot(&g.row(i)) - 0.5 * fi.norm_squared());
        let p = mdp.pair(i);
        let mut next_f = DVector::zeros(n);
        for s2 in 0..mdp.num_states() {
            let pt = mdp.transition(p.state, p.action, s2);
            if pt == 0.0 {
                continue;
            }
            for a2 in 0..na {
                next_f += f.row(s2 * na + a2).transpose() * (pt * policy.prob(s2, a2));
            }
        }
        total -= occupancy.gamma * d[i] * next_f.dot(&wi.transpose());
    }
    let mean_w = w.tr_mul(d);
    total += lambda * (tau.dot(&mean_w) - 0.5 * tau.norm_squared());
    Ok(total)
}

/// `1/2 E_d[|nu / d|^2] + lambda/2 |E_d[w]|^2`, the value of `max_{f,tau} L(w, f, tau)`.
pub fn reweighted_objective(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    w: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    occupancy.require_positive()?;
    let nu = flow_residual_rows(mdp, policy, occupancy, w);
    let weighted: f64 = nu.row_iter().zip(occupancy.d.iter()).map(|(r, d)| r.norm_squared() / d).sum();
    Ok(0.5 * weighted + 0.5 * lambda * w.tr_mul(&occupancy.d).norm_squared())
}

/// The maximisers of `L(w, ., .)`: `f = nu / d`, `tau = E_d[w]`.
pub fn dual_maximizer(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    w: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    occupancy.require_positive()?;
    let nu = flow_residual_rows(mdp, policy, occupancy, w);
    Ok((scale_rows(&nu, &occupancy.d.map(|v| 1.0 / v)), w.tr_mul(&occupancy.d)))
}

/// `alpha`, `beta` are `d_f x n`; `tau` has length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleState {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub tau: DVector<f64>,
    pub lambda: f64,
    pub gamma: f64,
    pub step_index: u64,
}

impl SaddleState {
    pub fn zeros(feature_dim: usize, num_params: usize, gamma: f64, lambda: f64) -> Self {
        Self {
            alpha: DMatrix::zeros(feature_dim, num_params),
            beta: DMatrix::zeros(feature_dim, num_params),
            tau: DVector::zeros(num_params),
            lambda,
            gamma,
            step_index: 0,
        }
    }

    pub fn project(&mut self, sets: &ProjectionSets) {
        project_ball(self.alpha.as_mut_slice(), sets.r_x);
        project_ball(self.beta.as_mut_slice(), sets.r_y);
        project_ball(self.tau.as_mut_slice(), sets.r_z);
    }

    pub fn point(&self) -> SaddlePoint {
        SaddlePoint { alpha: self.alpha.clone(), beta: self.beta.clone(), tau: self.tau.clone() }
    }
}

fn project_ball(x: &mut [f64], radius: f64) {
    let norm = libm::sqrt(x.iter().map(|v| v * v).sum::<f64>());
    if norm > radius {
        let s = if norm > 0.0 { radius / norm } else { 0.0 };
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// One stochastic primal-dual step on `(s, a, s', a')`:
///
/// ```text
/// alpha -= eps Phi (f_b - gamma f_b' + lambda tau)^T
/// beta  += eps [Phi (w_a - g - f_b)^T - gamma Phi' w_a^T]
/// tau   += eps lambda (w_a - tau)
/// ```
///
/// where `f_b = beta^T Phi`, `f_b' = beta^T Phi'`, `w_a = alpha^T Phi` and
/// `g = score(s, a)`. All right-hand sides use the pre-step values.
pub fn saddle_step(
    state: &mut SaddleState,
    sample: &TransitionSample,
    eps: f64,
    features: &FeatureMap,
    policy: &PolicyTable,
) -> Result<()> {
    let (df, n) = state.alpha.shape();
    if df != features.dim() || state.beta.shape() != (df, n) || state.tau.len() != n || n != policy.num_params() {
        return Err(config_err!(
            "saddle state shapes do not match {} features and {} parameters",
            features.dim(),
            policy.num_params()
        ));
    }
    let na = policy.num_actions();
    let (i, j) = (sample.state * na + sample.action, sample.next_state * na + sample.next_action);
    if i.max(j) >= features.num_pairs() {
        return Err(config_err!("sample pair outside the feature map"));
    }
    let (phi, phi2) = (features.sparse(i), features.sparse(j));
    let project = |m: &DMatrix<f64>, sp: &[(usize, f64)]| {
        let mut out = vec![0.0; n];
        for &(k, v) in sp {
            for (c, o) in out.iter_mut().enumerate() {
                *o += v * m[(k, c)];
            }
        }
        out
    };
    let fb = project(&state.beta, phi);
    let fb2 = project(&state.beta, phi2);
    let wa = project(&state.alpha, phi);
    let mut g = vec![0.0; n];
    policy.add_score(sample.state, sample.action, 1.0, &mut g);
    let (gamma, lambda) = (state.gamma, state.lambda);

    for &(k, v) in phi {
        for c in 0..n {
            state.alpha[(k, c)] -= eps * v * (fb[c] - gamma * fb2[c] + lambda * state.tau[c]);
            state.beta[(k, c)] += eps * v * (wa[c] - g[c] - fb[c]);
        }
    }
    for &(k, v) in phi2 {
        for c in 0..n {
            state.beta[(k, c)] -= eps * gamma * v * wa[c];
        }
    }
    for c in 0..n {
        state.tau[c] += eps * lambda * (wa[c] - state.tau[c]);
    }
    state.step_index += 1;
    Ok(())
}

/// `(alpha, beta, tau)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddlePoint {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub tau: DVector<f64>,
}

impl SaddlePoint {
    /// `w = alpha^T Phi` for every pair.
    pub fn table(&self, features: &FeatureMap, gamma: f64) -> GradTable {
        GradTable { gamma, w: features.evaluate(&self.alpha) }
    }

    /// Euclidean distance to `other` over all three blocks.
    pub fn distance(&self, other: &SaddlePoint) -> f64 {
        libm::sqrt(
            (&self.alpha - &other.alpha).norm_squared()
                + (&self.beta - &other.beta).norm_squared()
                + (&self.tau - &other.tau).norm_squared(),
        )
    }
}

/// Mean dynamics `x' = G x + h`, applied per parameter column to
/// `x = [alpha; beta; tau]` (the `tau` row is absent when `lambda = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleSystem {
    pub g: DMatrix<f64>,
    /// One column per parameter.
    pub h: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `Psi D e`.
    pub m: DVector<f64>,
    pub lambda: f64,
    pub gamma: f64,
}

impl SaddleSystem {
    pub fn feature_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.b.ncols()
    }

    pub fn has_tau(&self) -> bool {
        self.lambda > 0.0
    }

    /// Stacks a point into the `G` layout, one column per parameter.
    pub fn stack(&self, point: &SaddlePoint) -> DMatrix<f64> {
        let (df, n) = (self.feature_dim(), self.num_params());
        let rows = self.g.nrows();
        let mut x = DMatrix::zeros(rows, n);
        x.rows_mut(0, df).copy_from(&point.alpha);
        x.rows_mut(df, df).copy_from(&point.beta);
        if self.has_tau() {
            x.row_mut(2 * df).copy_from(&point.tau.transpose());
        }
        x
    }

    pub fn unstack(&self, x: &DMatrix<f64>) -> SaddlePoint {
        let df = self.feature_dim();
        let tau = if self.has_tau() { x.row(2 * df).transpose() } else { DVector::zeros(self.num_params()) };
        SaddlePoint { alpha: x.rows(0, df).into_owned(), beta: x.rows(df, df).into_owned(), tau }
    }

    /// `L(alpha, beta, tau)` from the assembled blocks.
    pub fn loss(&self, point: &SaddlePoint) -> f64 {
        let (alpha, beta, tau) = (&point.alpha, &point.beta, &point.tau);
        beta.dot(&self.a.tr_mul(alpha)) - beta.dot(&self.b) - 0.5 * beta.dot(&(&self.c * beta))
            + self.lambda * (tau.dot(&alpha.tr_mul(&self.m)) - 0.5 * tau.norm_squared())
    }
}

/// Exact `G`, `h` and the blocks `A`, `B`, `C`, `m`.
pub fn assemble_saddle_system(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    features: &FeatureMap,
    lambda: f64,
) -> Result<SaddleSystem> {
    check_lambda(lambda)?;
    features.check_pairs(mdp.num_pairs())?;
    features.require_full_rank()?;
    occupancy.require_positive().map_err(|e| LdgError::Assumption(alloc::format!("{e}")))?;
    let sa = mdp.num_pairs();
    let psi = features.psi();
    let psi_d = scale_rows(&psi.transpose(), &occupancy.d).transpose();
    let flow = DMatrix::identity(sa, sa) - mdp.pair_chain(policy) * occupancy.gamma;
    let a = &psi_d * flow * psi.transpose();
    let b = &psi_d * policy.score_matrix();
    let c = &psi_d * psi.transpose();
    let m = psi * &occupancy.d;
    let df = features.dim();
    let with_tau = lambda > 0.0;
    let size = if with_tau { 2 * df + 1 } else { 2 * df };
    let mut g = DMatrix::zeros(size, size);
    g.view_mut((0, df), (df, df)).copy_from(&(-&a));
    g.view_mut((df, 0), (df, df)).copy_from(&a.transpose());
    g.view_mut((df, df), (df, df)).copy_from(&(-&c));
    if with_tau {
        g.view_mut((0, 2 * df), (df, 1)).copy_from(&(&m * -lambda));
        g.view_mut((2 * df, 0), (1, df)).copy_from(&(m.transpose() * lambda));
        g[(2 * df, 2 * df)] = -lambda;
    }
    let mut h = DMatrix::zeros(size, b.ncols());
    h.rows_mut(df, df).copy_from(&(-&b));
    Ok(SaddleSystem { g, h, a, b, c, m, lambda, gamma: occupancy.gamma })
}

/// Equilibrium of the mean dynamics, `G x + h = 0`.
pub fn solve_saddle_fixed_point(system: &SaddleSystem) -> Result<SaddlePoint> {
    let x = solve_square(&system.g, &(-&system.h)).map_err(|e| match e {
        LdgError::Model(msg) => LdgError::Assumption(alloc::format!(
            "saddle matrix G is singular (A singular with lambda = 0?): {msg}"
        )),
        other => other,
    })?;
    Ok(system.unstack(&x))
}

/// Frobenius balls `|alpha| <= r_x`, `|beta| <= r_y`, `|tau| <= r_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSets {
    pub r_x: f64,
    pub r_y: f64,
    pub r_z: f64,
}

impl ProjectionSets {
    pub fn new(r_x: f64, r_y: f64, r_z: f64) -> Result<Self> {
        for r in [r_x, r_y, r_z] {
            if !r.is_finite() || r < 0.0 {
                return Err(config_err!("projection radius {r} must be finite and non-negative"));
            }
        }
        Ok(Self { r_x, r_y, r_z })
    }

    pub fn uniform(radius: f64) -> Result<Self> {
        Self::new(radius, radius, radius)
    }

    /// `10 |x*|` around a known solution, 100 otherwise.
    pub fn default_for(solution: Option<&SaddlePoint>) -> Self {
        let norm = solution.map(|p| p.distance(&SaddlePoint {
            alpha: DMatrix::zeros(p.alpha.nrows(), p.alpha.ncols()),
            beta: DMatrix::zeros(p.beta.nrows(), p.beta.ncols()),
            tau: DVector::zeros(p.tau.len()),
        }));
        let r = match norm {
            Some(v) if v > 0.0 => 10.0 * v,
            _ => 100.0,
        };
        Self { r_x: r, r_y: r, r_z: r }
    }

    pub fn contains(&self, point: &SaddlePoint) -> bool {
        point.alpha.norm() <= self.r_x && point.beta.norm() <= self.r_y && point.tau.norm() <= self.r_z
    }
}

/// Step sizes for the saddle iteration, indexed from `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `c / (m_star sqrt(t))`.
    InverseSqrt { c: f64, m_star: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant(e) => e.is_finite() && e >= 0.0,
            StepSchedule::InverseSqrt { c, m_star } => c.is_finite() && c > 0.0 && m_star.is_finite() && m_star > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(config_err!("invalid saddle step schedule {self:?}"))
        }
    }

    pub fn rate(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Constant(e) => e,
            StepSchedule::InverseSqrt { c, m_star } => c / (m_star * libm::sqrt(t as f64)),
        }
    }
}

/// Projected stochastic primal-dual iteration with step-weighted averaging
/// of the iterates `x_1, ..., x_m` (`x_1` is the zero initialisation).
///
/// `alpha` and `beta` are stored as `scale * raw` so a projection is O(1);
/// the average of a row is only brought up to date when the row changes.
#[derive(Debug, Clone)]
pub struct ProjectedLdg {
    features: FeatureMap,
    policy: PolicyTable,
    gamma: f64,
    lambda: f64,
    sets: ProjectionSets,
    schedule: StepSchedule,
    t: u64,
    alpha: Scaled,
    beta: Scaled,
    tau: DVector<f64>,
    tau_sum: DVector<f64>,
    weight: f64,
}

#[derive(Debug, Clone)]
struct Scaled {
    raw: DMatrix<f64>,
    scale: f64,
    raw_sq: f64,
    /// `sum eps_i scale_i raw_i` flushed up to `flushed[r]` per row.
    sum: DMatrix<f64>,
    flushed: Vec<f64>,
    /// Running `sum eps_i scale_i`.
    prefix: f64,
}

impl Scaled {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            raw: DMatrix::zeros(rows, cols),
            scale: 1.0,
            raw_sq: 0.0,
            sum: DMatrix::zeros(rows, cols),
            flushed: vec![0.0; rows],
            prefix: 0.0,
        }
    }

    fn value(&self, r: usize, c: usize) -> f64 {
        self.scale * self.raw[(r, c)]
    }

    fn record(&mut self, eps: f64) {
        self.prefix += eps * self.scale;
    }

    fn flush_row(&mut self, r: usize) {
        let pending = self.prefix - self.flushed[r];
        if pending != 0.0 {
            for c in 0..self.raw.ncols() {
                self.sum[(r, c)] += pending * self.raw[(r, c)];
            }
        }
        self.flushed[r] = self.prefix;
    }

    /// Adds `delta` (in true units) to row `r`, keeping `raw_sq` current.
    fn add_row(&mut self, r: usize, delta: &[f64]) {
        self.flush_row(r);
        let inv = 1.0 / self.scale;
        for (c, d) in delta.iter().enumerate() {
            let old = self.raw[(r, c)];
            let new = old + d * inv;
            self.raw_sq += new * new - old * old;
            self.raw[(r, c)] = new;
        }
    }

    fn project(&mut self, radius: f64) {
        let norm = self.scale * libm::sqrt(self.raw_sq.max(0.0));
        if norm > radius {
            if radius == 0.0 {
                for r in 0..self.raw.nrows() {
                    self.flush_row(r);
                }
                self.raw.fill(0.0);
                self.raw_sq = 0.0;
                self.scale = 1.0;
                return;
            }
            self.scale *= radius / norm;
            // Later prefix increments are scaled down with `scale`; keep them
            // within a few digits of the running prefix.
            if self.scale < 1e-4 {
                self.renormalize();
            }
        }
    }

    fn renormalize(&mut self) {
        for r in 0..self.raw.nrows() {
            self.flush_row(r);
        }
        self.raw *= self.scale;
        self.scale = 1.0;
        self.raw_sq = self.raw.norm_squared();
        self.prefix = 0.0;
        self.flushed.fill(0.0);
    }

    fn current(&self) -> DMatrix<f64> {
        &self.raw * self.scale
    }

    fn average(&self, weight: f64) -> DMatrix<f64> {
        let mut out = self.sum.clone();
        for r in 0..out.nrows() {
            let pending = self.prefix - self.flushed[r];
            for c in 0..out.ncols() {
                out[(r, c)] += pending * self.raw[(r, c)];
            }
        }
        out / weight
    }
}

impl ProjectedLdg {
    pub fn new(
        features: FeatureMap,
        policy: PolicyTable,
        gamma: f64,
        lambda: f64,
        sets: ProjectionSets,
        schedule: StepSchedule,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        schedule.validate()?;
        features.check_pairs(policy.num_states() * policy.num_actions())?;
        let (df, n) = (features.dim(), policy.num_params());
        Ok(Self {
            features,
            policy,
            gamma,
            lambda,
            sets,
            schedule,
            t: 0,
            alpha: Scaled::new(df, n),
            beta: Scaled::new(df, n),
            tau: DVector::zeros(n),
            tau_sum: DVector::zeros(n),
            weight: 0.0,
        })
    }

    /// Starts the iteration at `point` (projected onto the sets) instead of
    /// zero. Nothing has been recorded yet, so `point` becomes `x_1`.
    pub fn starting_at(mut self, point: &SaddlePoint) -> Result<Self> {
        let (df, n) = self.alpha.raw.shape();
        if point.alpha.shape() != (df, n) || point.beta.shape() != (df, n) || point.tau.len() != n {
            return Err(config_err!("starting point does not match {df} features and {n} parameters"));
        }
        let mut start = SaddleState::zeros(df, n, self.gamma, self.lambda);
        start.alpha.copy_from(&point.alpha);
        start.beta.copy_from(&point.beta);
        start.tau.copy_from(&point.tau);
        start.project(&self.sets);
        self.alpha.raw_sq = start.alpha.norm_squared();
        self.alpha.raw = start.alpha;
        self.beta.raw_sq = start.beta.norm_squared();
        self.beta.raw = start.beta;
        self.tau = start.tau;
        Ok(self)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Records the current iterate with weight `eps_t`, then takes one
    /// projected step on `sample`.
    pub fn step(&mut self, sample: &TransitionSample) {
        self.t += 1;
        let eps = self.schedule.rate(self.t);
        self.alpha.record(eps);
        self.beta.record(eps);
        self.tau_sum.axpy(eps, &self.tau, 1.0);
        self.weight += eps;
        if eps == 0.0 {
            return;
        }

        let n = self.tau.len();
        let na = self.policy.num_actions();
        let i = sample.state * na + sample.action;
        let j = sample.next_state * na + sample.next_action;
        let phi: Vec<(usize, f64)> = self.features.sparse(i).to_vec();
        let phi2: Vec<(usize, f64)> = self.features.sparse(j).to_vec();
        let read = |m: &Scaled, sp: &[(usize, f64)]| {
            let mut out = vec![0.0; n];
            for &(k, v) in sp {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += v * m.value(k, c);
                }
            }
            out
        };
        let fb = read(&self.beta, &phi);
        let fb2 = read(&self.beta, &phi2);
        let wa = read(&self.alpha, &phi);
        let mut g = vec![0.0; n];
        self.policy.add_score(sample.state, sample.action, 1.0, &mut g);
        let (gamma, lambda) = (self.gamma, self.lambda);

        let mut delta = vec![0.0; n];
        for &(k, v) in &phi {
            for c in 0..n {
                delta[c] = -eps * v * (fb[c] - gamma * fb2[c] + lambda * self.tau[c]);
            }
            self.alpha.add_row(k, &delta);
        }
        // beta receives phi (w_a - g - f_b) and -gamma phi' w_a; rows may coincide.
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(phi.len() + phi2.len());
        for &(k, v) in &phi {
            rows.push((k, (0..n).map(|c| eps * v * (wa[c] - g[c] - fb[c])).collect()));
        }
        for &(k, v) in &phi2 {
            let d: Vec<f64> = (0..n).map(|c| -eps * gamma * v * wa[c]).collect();
            match rows.iter_mut().find(|(r, _)| *r == k) {
                Some((_, acc)) => acc.iter_mut().zip(d).for_each(|(a, b)| *a += b),
                None => rows.push((k, d)),
            }
        }
        for (k, d) in rows {
            self.beta.add_row(k, &d);
        }
        for c in 0..n {
            self.tau[c] += eps * lambda * (wa[c] - self.tau[c]);
        }

        self.alpha.project(self.sets.r_x);
        self.beta.project(self.sets.r_y);
        project_ball(self.tau.as_mut_slice(), self.sets.r_z);
    }

    /// The latest iterate.
    pub fn current(&self) -> SaddlePoint {
        SaddlePoint { alpha: self.alpha.current(), beta: self.beta.current(), tau: self.tau.clone() }
    }

    /// Step-weighted average of the recorded iterates, or the current
    /// iterate when every recorded step size was zero.
    pub fn average(&self) -> SaddlePoint {
        if self.weight <= 0.0 {
            return self.current();
        }
        SaddlePoint {
            alpha: self.alpha.average(self.weight),
            beta: self.beta.average(self.weight),
            tau: &self.tau_sum / self.weight,
        }
    }
}

/// Runs `m` projected steps on exact draws from `d_gamma` and returns the
/// averaged iterate.
#[allow(clippy::too_many_arguments)]
pub fn run_projected_ldg<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma: f64,
    features: &FeatureMap,
    lambda: f64,
    sets: ProjectionSets,
    m: u64,
    schedule: StepSchedule,
    rng: &mut R,
) -> Result<SaddlePoint> {
    check_dims(policy, mdp)?;
    if m == 0 {
        return Err(config_err!("iteration count m must be at least 1"));
    }
    let table = policy.table();
    let occupancy = occupancy_for(mdp, &table, gamma)?;
    let mut sampler = OccupancySampler::exact(mdp, &table, &occupancy)?;
    let mut runner = ProjectedLdg::new(features.clone(), table, gamma, lambda, sets, schedule)?;
    for _ in 0..m {
        let sample = sampler.sample(rng);
        runner.step(&sample);
    }
    Ok(runner.average())
}

/// `max_{Y x Z} L(alpha_bar, ., .) - min_X L(., beta_bar, tau_bar)`, with
/// both inner problems solved exactly.
pub fn optimality_gap(system: &SaddleSystem, sets: &ProjectionSets, point: &SaddlePoint) -> f64 {
    let upper = max_dual(system, sets, &point.alpha).2;
    let (beta, tau) = (&point.beta, &point.tau);
    let lambda = system.lambda;
    let constant = -beta.dot(&system.b) - 0.5 * beta.dot(&(&system.c * beta)) - 0.5 * lambda * tau.norm_squared();
    let slope = &system.a * beta + &system.m * tau.transpose() * lambda;
    let lower = constant - sets.r_x * slope.norm();
    (upper - lower).max(0.0)
}

/// Maximiser `(beta, tau)` of `L(alpha, ., .)` over `Y x Z` and its value.
pub fn max_dual(system: &SaddleSystem, sets: &ProjectionSets, alpha: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, f64) {
    let k = system.a.tr_mul(alpha) - &system.b;
    let beta = trust_region_max(&system.c, &k, sets.r_y);
    let beta_value = beta.dot(&k) - 0.5 * beta.dot(&(&system.c * &beta));
    let lambda = system.lambda;
    let mut tau = alpha.tr_mul(&system.m);
    if lambda > 0.0 {
        project_ball(tau.as_mut_slice(), sets.r_z);
    } else {
        tau.fill(0.0);
    }
    let tau_value = lambda * (tau.dot(&alpha.tr_mul(&system.m)) - 0.5 * tau.norm_squared());
    (beta, tau, beta_value + tau_value)
}

/// `argmax_{|beta|_F <= radius} <beta, k> - 1/2 <beta, c beta>` for
/// symmetric positive definite `c`: `beta = (c + mu I)^{-1} k` with the
/// smallest `mu >= 0` that meets the constraint, found by bisection.
fn trust_region_max(c: &DMatrix<f64>, k: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    if radius == 0.0 || k.norm() == 0.0 {
        return DMatrix::zeros(k.nrows(), k.ncols());
    }
    let eig = c.clone().symmetric_eigen();
    let kt = eig.eigenvectors.tr_mul(k);
    let row_sq: Vec<f64> = kt.row_iter().map(|r| r.norm_squared()).collect();
    let norm_sq = |mu: f64| -> f64 {
        row_sq
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(q, l)| if *q == 0.0 { 0.0 } else { q / ((l + mu) * (l + mu)) })
            .sum()
    };
    let positive = eig.eigenvalues.iter().all(|l| *l > 0.0);
    let mu = if positive && norm_sq(0.0) <= radius * radius {
        0.0
    } else {
        let mut lo = (-eig.eigenvalues.min()).max(0.0);
        let mut hi = lo + libm::sqrt(row_sq.iter().sum::<f64>()) / radius;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if norm_sq(mid) > radius * radius {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let mut scaled = kt;
    for (mut row, l) in scaled.row_iter_mut().zip(eig.eigenvalues.iter()) {
        row /= l + mu;
    }
    &eig.eigenvectors * scaled
}

/// `c / (M* sqrt(t))` scale `M*` from exact second moments of the sampled
/// update blocks.
///
/// With `delta = Phi (Phi - gamma Phi')^T` the blocks are
/// `G1 = [delta, lambda Phi]` (alpha driven by beta, tau),
/// `G2 = [delta^T; lambda Phi^T]` (beta, tau driven by alpha),
/// `G3 = diag(-Phi Phi^T, -lambda)` and `G4 = -Phi g^T`. With
/// `D_a = r_x^2`, `D_y = r_y^2 + r_z^2` (`r_y^2` alone when `lambda = 0`):
///
/// ```text
/// C_a = E|G1|^2 D_y
/// C_y = E|G2|^2 D_a + E|G3|^2 D_y + E|G4|^2
/// M*^2 = 2 D_a C_a + 2 D_y C_y
/// ```
pub fn step_scale(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    occupancy: &OccupancyTable,
    features: &FeatureMap,
    sets: &ProjectionSets,
    lambda: f64,
) -> Result<f64> {
    check_lambda(lambda)?;
    features.check_pairs(mdp.num_pairs())?;
    let na = mdp.num_actions();
    let gamma = occupancy.gamma;
    let l2 = lambda * lambda;
    let (mut e1, mut e3, mut e4) = (0.0, 0.0, 0.0);
    for i in 0..mdp.num_pairs() {
        let d = occupancy.d[i];
        if d == 0.0 {
            continue;
        }
        let p = mdp.pair(i);
        let phi = features.phi(i);
        let phi_sq = phi.norm_squared();
        let g_sq: f64 = policy.score(p.state, p.action).iter().map(|v| v * v).sum();
        e3 += d * (phi_sq * phi_sq + l2);
        e4 += d * phi_sq * g_sq;
        for s2 in 0..mdp.num_states() {
            let pt = mdp.transition(p.state, p.action, s2);
            if pt == 0.0 {
                continue;
            }
            for a2 in 0..na {
                let w = d * pt * policy.prob(s2, a2);
                let diff = &phi - features.phi(s2 * na + a2) * gamma;
                e1 += w * (phi_sq * diff.norm_squared() + l2 * phi_sq);
            }
        }
    }
    let e2 = e1;
    let d_a = sets.r_x * sets.r_x;
    let d_y = sets.r_y * sets.r_y + if lambda > 0.0 { sets.r_z * sets.r_z } else { 0.0 };
    let c_a = e1 * d_y;
    let c_y = e2 * d_a + e3 * d_y + e4;
    let m_star = libm::sqrt(2.0 * d_a * c_a + 2.0 * d_y * c_y);
    if !(m_star > 0.0) || !m_star.is_finite() {
        return Err(config_err!("step scale M* = {m_star}; the projection sets are degenerate"));
    }
    Ok(m_star)
}

/// `(1/m) sum_i w(s_i, a_i) r_i`.
pub fn estimate_gradient_from_w(samples: &[(StateActionPair, f64)], w: &GradTable, num_actions: usize) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(config_err!("cannot estimate a gradient from zero samples"));
    }
    let mut out = DVector::zeros(w.num_params());
    for (pair, r) in samples {
        let i = pair.state * num_actions + pair.action;
        if i >= w.num_pairs() {
            return Err(config_err!("sample pair ({}, {}) outside the table", pair.state, pair.action));
        }
        if *r != 0.0 {
            out += w.w.row(i).transpose() * *r;
        }
    }
    Ok(out / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::log_density_gradient_for;
    use crate::mdp::make_gridworld;
    use crate::rng::rng_from_seed;

    fn single(gamma: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![0.0], vec![1.0], gamma).unwrap()
    }

    fn bandit() -> TabularMdp {
        TabularMdp::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0], 1.0).unwrap()
    }

    fn setup(m: &TabularMdp, gamma: f64) -> (PolicyTable, OccupancyTable, FeatureMap) {
        let t = SoftmaxPolicy::uniform(m).table();
        let occ = occupancy_for(m, &t, gamma).unwrap();
        (t, occ, FeatureMap::one_hot(m.num_pairs()))
    }

    #[test]
    fn step_arithmetic_single_pair() {
        let m = single(0.5);
        let (t, _, f) = setup(&m, 0.5);
        let mut st = SaddleState::zeros(1, 1, 0.5, 1.0);
        st.alpha.fill(1.0);
        st.beta.fill(1.0);
        st.tau.fill(1.0);
        let s = TransitionSample { state: 0, action: 0, next_state: 0, next_action: 0, restart: false };
        let before = st.clone();
        saddle_step(&mut st, &s, 0.0, &f, &t).unwrap();
        assert_eq!((&st.alpha, &st.beta, &st.tau), (&before.alpha, &before.beta, &before.tau));
        let eps = 0.1;
        saddle_step(&mut st, &s, eps, &f, &t).unwrap();
        assert!((st.alpha[(0, 0)] - (1.0 - eps * 1.5)).abs() < 1e-15);
        assert!((st.beta[(0, 0)] - (1.0 - eps * 0.5)).abs() < 1e-15);
        assert_eq!(st.tau[0], 1.0);
        assert!(saddle_step(&mut st, &s, eps, &FeatureMap::one_hot(2), &t).is_err());
    }

    #[test]
    fn single_pair_system() {
        let m = single(0.5);
        let (t, occ, f) = setup(&m, 0.5);
        let sys = assemble_saddle_system(&m, &t, &occ, &f, 1.0).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[0.0, -0.5, -1.0, 0.5, -1.0, 0.0, 1.0, 0.0, -1.0]);
        assert!((&sys.g - want).amax() < 1e-15);
        assert_eq!(sys.b[(0, 0)], 0.0);
        let sys0 = assemble_saddle_system(&m, &t, &occ, &f, 0.0).unwrap();
        assert_eq!(sys0.g.shape(), (2, 2));
        let p = solve_saddle_fixed_point(&sys).unwrap();
        assert_eq!(p.alpha[(0, 0)], 0.0);
    }

    #[test]
    fn bandit_fixed_point_is_score() {
        let m = bandit();
        let (t, occ, f) = setup(&m, 1.0);
        let sys = assemble_saddle_system(&m, &t, &occ, &f, 1.0).unwrap();
        let p = solve_saddle_fixed_point(&sys).unwrap();
        let w = p.table(&f, 1.0);
        assert!((&w.w - t.score_matrix()).amax() < 1e-8);
    }

    #[test]
    fn lambda_zero_at_gamma_one_is_singular() {
        let m = bandit();
        let (t, occ, f) = setup(&m, 1.0);
        let sys = assemble_saddle_system(&m, &t, &occ, &f, 0.0).unwrap();
        assert!(matches!(solve_saddle_fixed_point(&sys), Err(LdgError::Assumption(_))));
    }

    #[test]
    fn gridworld_fixed_point_matches_exact() {
        let m = make_gridworld(3).unwrap();
        let (t, occ, f) = setup(&m, 0.9);
        let exact = log_density_gradient_for(&m, &t, &occ, 1.0).unwrap();
        for lambda in [0.0, 1.0] {
            let sys = assemble_saddle_system(&m, &t, &occ, &f, lambda).unwrap();
            let p = solve_saddle_fixed_point(&sys).unwrap();
            assert!((&p.table(&f, 0.9).w - &exact.w).amax() < 1e-8);
            assert!(p.beta.amax() < 1e-8 && p.tau.amax() < 1e-8);
        }
    }

    #[test]
    fn loss_forms_agree() {
        let m = make_gridworld(2).unwrap();
        let (t, occ, f) = setup(&m, 0.7);
        let sys = assemble_saddle_system(&m, &t, &occ, &f, 0.8).unwrap();
        let mut rng = rng_from_seed(9);
        let mut rnd = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() - 0.5);
        let (alpha, beta) = (rnd(16, 16), rnd(16, 16));
        let tau = rnd(16, 1).column(0).into_owned();
        let direct = loss_l(&m, &t, &occ, &alpha, &beta, &tau, 0.8).unwrap();
        let matrix = sys.loss(&SaddlePoint { alpha, beta, tau });
        assert!((direct - matrix).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn loss_vanishes_without_dual() {
        let m = make_gridworld(2).unwrap();
        let (t, occ, _) = setup(&m, 0.7);
        let w = DMatrix::from_element(16, 16, 3.0);
        let z = DMatrix::zeros(16, 16);
        assert_eq!(loss_l(&m, &t, &occ, &w, &z, &DVector::zeros(16), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn gap_zero_at_saddle_and_positive_off_it() {
        let m = make_gridworld(2).unwrap();
        let (t, occ, f) = setup(&m, 0.9);
        let sys = assemble_saddle_system(&m, &t, &occ, &f, 1.0).unwrap();
        let p = solve_saddle_fixed_point(&sys).unwrap();
        let sets = ProjectionSets::default_for(Some(&p));
        assert!(optimality_gap(&sys, &sets, &p) < 1e-8);
        let mut off = p.clone();
        off.beta[(0, 0)] = 0.5;
        assert!(optimality_gap(&sys, &sets, &off) > 1e-3);
    }

    #[test]
    fn trust_region_hits_boundary() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let k = DMatrix::from_row_slice(2, 1, &[3.0, -4.0]);
        let free = trust_region_max(&c, &k, 1e6);
        assert!((&c * &free - &k).amax() < 1e-12);
        let b = trust_region_max(&c, &k, 0.5);
        assert!((b.norm() - 0.5).abs() < 1e-10);
        // Any other boundary point does no better.
        let value = |x: &DMatrix<f64>| x.dot(&k) - 0.5 * x.dot(&(&c * x));
        for i in 0..64 {
            let a = i as f64 * core::f64::consts::TAU / 64.0;
            let x = DMatrix::from_row_slice(2, 1, &[0.5 * libm::cos(a), 0.5 * libm::sin(a)]);
            assert!(value(&x) <= value(&b) + 1e-12);
        }
    }

    #[test]
    fn step_scale_single_pair_by_hand() {
        let m = single(0.5);
        let (t, occ, f) = setup(&m, 0.5);
        let sets = ProjectionSets::uniform(1.0).unwrap();
        // E|G1|^2 = 0.25 + 1, E|G3|^2 = 2, E|G4|^2 = 0, D_a = 1, D_y = 2.
        let c_a = 1.25 * 2.0;
        let c_y = 1.25 + 2.0 * 2.0;
        let want = libm::sqrt(2.0 * c_a + 2.0 * 2.0 * c_y);
        let got = step_scale(&m, &t, &occ, &f, &sets, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        let bigger = step_scale(&m, &t, &occ, &f, &ProjectionSets::uniform(2.0).unwrap(), 1.0).unwrap();
        assert!(bigger > got);
        assert!(step_scale(&m, &t, &occ, &f, &ProjectionSets::uniform(0.0).unwrap(), 1.0).is_err());
    }

    #[test]
    fn estimate_from_w() {
        let w = GradTable { gamma: 1.0, w: DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]) };
        let pair = |a| StateActionPair { state: 0, action: a };
        let g = estimate_gradient_from_w(&[(pair(0), 1.0), (pair(1), 0.0)], &w, 2).unwrap();
        assert_eq!(g.as_slice(), &[0.25, -0.25]);
        assert!(estimate_gradient_from_w(&[], &w, 2).is_err());
        let z = estimate_gradient_from_w(&[(pair(0), 0.0)], &w, 2).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_steps_return_initial_point() {
        let m = bandit();
        let p = SoftmaxPolicy::uniform(&m);
        let f = FeatureMap::one_hot(2);
        let sets = ProjectionSets::uniform(10.0).unwrap();
        let out = run_projected_ldg(&m, &p, 1.0, &f, 1.0, sets, 1, StepSchedule::Constant(0.0), &mut rng_from_seed(0)).unwrap();
        assert_eq!(out.alpha, DMatrix::zeros(2, 2));
    }

    fn dense_reference(
        m: &TabularMdp,
        p: &SoftmaxPolicy,
        gamma: f64,
        lambda: f64,
        sets: ProjectionSets,
        steps: u64,
        schedule: StepSchedule,
        seed: u64,
    ) -> SaddlePoint {
        let t = p.table();
        let occ = occupancy_for(m, &t, gamma).unwrap();
        let mut sampler = OccupancySampler::exact(m, &t, &occ).unwrap();
        let f = FeatureMap::one_hot(m.num_pairs());
        let mut st = SaddleState::zeros(f.dim(), t.num_params(), gamma, lambda);
        let mut acc = SaddleState::zeros(f.dim(), t.num_params(), gamma, lambda);
        let mut weight = 0.0;
        let mut rng = rng_from_seed(seed);
        for k in 1..=steps {
            let eps = schedule.rate(k);
            acc.alpha += &st.alpha * eps;
            acc.beta += &st.beta * eps;
            acc.tau += &st.tau * eps;
            weight += eps;
            let s = sampler.sample(&mut rng);
            saddle_step(&mut st, &s, eps, &f, &t).unwrap();
            st.project(&sets);
        }
        SaddlePoint { alpha: acc.alpha / weight, beta: acc.beta / weight, tau: acc.tau / weight }
    }

    #[test]
    fn lazy_runner_matches_dense_reference() {
        let m = make_gridworld(2).unwrap();
        let mut rng = rng_from_seed(3);
        let theta = (0..16).map(|_| rng.random::<f64>() - 0.5).collect();
        let p = SoftmaxPolicy::for_mdp(&m, theta).unwrap();
        // Small radii force frequent projections.
        for (sets, schedule) in [
            (ProjectionSets::uniform(0.3).unwrap(), StepSchedule::Constant(0.2)),
            (ProjectionSets::new(50.0, 0.1, 0.05).unwrap(), StepSchedule::InverseSqrt { c: 1.0, m_star: 2.0 }),
        ] {
            let f = FeatureMap::one_hot(16);
            let lazy = run_projected_ldg(&m, &p, 0.9, &f, 1.0, sets, 3000, schedule, &mut rng_from_seed(8)).unwrap();
            let dense = dense_reference(&m, &p, 0.9, 1.0, sets, 3000, schedule, 8);
            assert!(lazy.distance(&dense) < 1e-10, "{}", lazy.distance(&dense));
        }
    }

    #[test]
    fn warm_start_is_first_recorded_iterate() {
        let m = bandit();
        let t = SoftmaxPolicy::uniform(&m).table();
        let sets = ProjectionSets::uniform(10.0).unwrap();
        let start = SaddlePoint {
            alpha: DMatrix::from_element(2, 2, 0.5),
            beta: DMatrix::from_element(2, 2, -0.25),
            tau: DVector::from_element(2, 0.1),
        };
        let mut run = ProjectedLdg::new(FeatureMap::one_hot(2), t, 1.0, 1.0, sets, StepSchedule::Constant(0.0))
            .unwrap()
            .starting_at(&start)
            .unwrap();
        assert_eq!(run.current(), start);
        let s = TransitionSample { state: 0, action: 1, next_state: 0, next_action: 0, restart: false };
        run.step(&s);
        assert!(run.average().distance(&start) < 1e-15);
    }

    #[test]
    fn projected_runs_are_deterministic() {
        let m = bandit();
        let p = SoftmaxPolicy::uniform(&m);
        let f = FeatureMap::one_hot(2);
        let sets = ProjectionSets::uniform(10.0).unwrap();
        let sch = StepSchedule::Constant(0.05);
        let a = run_projected_ldg(&m, &p, 1.0, &f, 1.0, sets, 500, sch, &mut rng_from_seed(1)).unwrap();
        let b = run_projected_ldg(&m, &p, 1.0, &f, 1.0, sets, 500, sch, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
    }
}
