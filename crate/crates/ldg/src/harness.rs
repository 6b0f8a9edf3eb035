//! Policy-optimisation loops for the four gradient estimators.

use std::time::Instant;

use ldg_core::exact::{
    exact_policy_gradient_ldg, occupancy_for, policy_performance, practical_policy_gradient, residual_decomposition,
};
use ldg_core::minmax::{estimate_gradient_from_w, step_scale, ProjectedLdg, ProjectionSets, SaddlePoint, StepSchedule};
use ldg_core::nalgebra::DVector;
use ldg_core::rng::{rng_stream, LdgRng};
use ldg_core::sampling::{ChainTables, OccupancySampler};
use ldg_core::{FeatureMap, SoftmaxPolicy, TabularMdp};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::io::load_env;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Reinforce,
    TheoreticalPg,
    TheoreticalLdg,
    MinmaxLdg,
}

impl Estimator {
    pub const ALL: [Estimator; 4] =
        [Estimator::Reinforce, Estimator::TheoreticalPg, Estimator::TheoreticalLdg, Estimator::MinmaxLdg];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Reinforce => "reinforce",
            Estimator::TheoreticalPg => "theoretical-pg",
            Estimator::TheoreticalLdg => "theoretical-ldg",
            Estimator::MinmaxLdg => "minmax-ldg",
        }
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Estimator {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown estimator {s:?}")))
    }
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    pub horizon: usize,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        Self { horizon: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoreticalConfig {
    /// Adds the residual term to the practical gradient.
    pub residual_correction: bool,
    pub lambda: f64,
}

impl Default for TheoreticalConfig {
    fn default() -> Self {
        Self { residual_correction: false, lambda: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepConfig {
    Constant { eps: f64 },
    /// `c / (M* sqrt(t))` with `M*` from exact second moments.
    InverseSqrt { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinmaxConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Common radius of the three projection balls.
    pub radius: f64,
    pub step: StepConfig,
    /// Start each outer iteration from the previous averaged estimate.
    pub warm_start: bool,
}

impl Default for MinmaxConfig {
    fn default() -> Self {
        Self { gamma: 1.0, lambda: 1.0, radius: 100.0, step: StepConfig::Constant { eps: 0.1 }, warm_start: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `grid-<side>` or a path to an MDP JSON file.
    pub env: String,
    pub gamma_eval: f64,
    pub estimator: Estimator,
    pub learning_rate: f64,
    /// Step along `g / |g|` instead of `g`, so every estimator moves the
    /// same distance per iteration and only directions are compared.
    pub normalize_gradient: bool,
    pub iterations: usize,
    /// Samples per outer iteration for the sampled estimators.
    pub budget: u64,
    pub seeds: Vec<u64>,
    pub reinforce: ReinforceConfig,
    pub theoretical: TheoreticalConfig,
    pub minmax: MinmaxConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: "grid-3".into(),
            gamma_eval: 0.9,
            estimator: Estimator::MinmaxLdg,
            learning_rate: 0.1,
            normalize_gradient: false,
            iterations: 200,
            budget: 10_000,
            seeds: vec![0],
            reinforce: ReinforceConfig::default(),
            theoretical: TheoreticalConfig::default(),
            minmax: MinmaxConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if !(0.0..1.0).contains(&self.gamma_eval) {
            return fail(format!("gamma_eval must lie in [0, 1), got {}", self.gamma_eval));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.reinforce.horizon == 0 {
            return fail("reinforce.horizon must be at least 1".into());
        }
        let sampled = matches!(self.estimator, Estimator::Reinforce | Estimator::MinmaxLdg);
        if sampled && self.budget == 0 {
            return fail("budget must be at least 1".into());
        }
        if self.estimator == Estimator::Reinforce && self.budget < self.reinforce.horizon as u64 {
            return fail(format!(
                "budget {} is smaller than one episode of horizon {}",
                self.budget, self.reinforce.horizon
            ));
        }
        let mm = &self.minmax;
        if !(0.0..=1.0).contains(&mm.gamma) {
            return fail(format!("minmax.gamma must lie in [0, 1], got {}", mm.gamma));
        }
        if !mm.lambda.is_finite() || mm.lambda < 0.0 || (mm.gamma == 1.0 && mm.lambda == 0.0) {
            return fail(format!("minmax.lambda {} invalid for gamma {}", mm.lambda, mm.gamma));
        }
        if !(mm.radius > 0.0) || !mm.radius.is_finite() {
            return fail(format!("minmax.radius must be positive, got {}", mm.radius));
        }
        match mm.step {
            StepConfig::Constant { eps } if !(eps > 0.0) || !eps.is_finite() => {
                fail(format!("minmax.step.eps must be positive, got {eps}"))
            }
            StepConfig::InverseSqrt { c } if !(c > 0.0) || !c.is_finite() => {
                fail(format!("minmax.step.c must be positive, got {c}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub estimator: Estimator,
    pub seed: u64,
    pub iteration: usize,
    #[serde(rename = "J1")]
    pub j1: f64,
    /// `1 - cos(estimate, exact grad J_1)`.
    pub gradient_error: Option<f64>,
    /// Cumulative.
    pub samples_consumed: u64,
    pub wall_clock_ns: u128,
}

/// Monte-Carlo policy gradient: `sum_t score(s_t, a_t) G_t` with
/// `G_t = sum_{k >= t} gamma^{k-t} r_k`, averaged over episodes from `d_0`.
pub fn gradient_reinforce(
    mdp: &TabularMdp,
    policy: &SoftmaxPolicy,
    gamma_eval: f64,
    episodes: usize,
    horizon: usize,
    rng: &mut LdgRng,
) -> Result<DVector<f64>> {
    if episodes == 0 || horizon == 0 {
        return Err(HarnessError::Config("episodes and horizon must be at least 1".into()));
    }
    let table = policy.table();
    let chain = ChainTables::new(mdp, &table)?;
    let mut grad = vec![0.0; policy.num_params()];
    for _ in 0..episodes {
        let traj = chain.trajectory(horizon, rng);
        let mut ret = 0.0;
        for step in traj.iter().rev() {
            ret = step.reward + gamma_eval * ret;
            if ret != 0.0 {
                table.add_score(step.state, step.action, ret, &mut grad);
            }
        }
    }
    Ok(DVector::from_vec(grad) / episodes as f64)
}

/// Estimator state carried across outer iterations.
struct Estimation {
    features: Option<FeatureMap>,
    previous: Option<SaddlePoint>,
}

impl Estimation {
    fn new(mdp: &TabularMdp, estimator: Estimator) -> Self {
        let features = (estimator == Estimator::MinmaxLdg).then(|| FeatureMap::one_hot(mdp.num_pairs()));
        Self { features, previous: None }
    }

    fn estimate(
        &mut self,
        config: &ExperimentConfig,
        mdp: &TabularMdp,
        policy: &SoftmaxPolicy,
        rng: &mut LdgRng,
    ) -> Result<(DVector<f64>, u64)> {
        match config.estimator {
            Estimator::Reinforce => {
                let horizon = config.reinforce.horizon;
                let episodes = (config.budget / horizon as u64) as usize;
                let g = gradient_reinforce(mdp, policy, config.gamma_eval, episodes, horizon, rng)?;
                Ok((g, (episodes * horizon) as u64))
            }
            Estimator::TheoreticalPg => {
                let report = if config.theoretical.residual_correction {
                    residual_decomposition(mdp, policy, config.gamma_eval, config.theoretical.lambda)?
                } else {
                    practical_policy_gradient(mdp, policy, config.gamma_eval)?
                };
                Ok((report.grad, 0))
            }
            Estimator::TheoreticalLdg => Ok((exact_policy_gradient_ldg(mdp, policy, 1.0, config.theoretical.lambda)?.grad, 0)),
            Estimator::MinmaxLdg => self.minmax(config, mdp, policy, rng),
        }
    }

    fn minmax(
        &mut self,
        config: &ExperimentConfig,
        mdp: &TabularMdp,
        policy: &SoftmaxPolicy,
        rng: &mut LdgRng,
    ) -> Result<(DVector<f64>, u64)> {
        let mm = &config.minmax;
        let features = self.features.as_ref().expect("features are built for the min-max estimator");
        let table = policy.table();
        let occupancy = occupancy_for(mdp, &table, mm.gamma)?;
        let sets = ProjectionSets::uniform(mm.radius)?;
        let schedule = match mm.step {
            StepConfig::Constant { eps } => StepSchedule::Constant(eps),
            StepConfig::InverseSqrt { c } => StepSchedule::InverseSqrt {
                c,
                m_star: step_scale(mdp, &table, &occupancy, features, &sets, mm.lambda)?,
            },
        };
        let mut sampler = OccupancySampler::exact(mdp, &table, &occupancy)?;
        let mut runner = ProjectedLdg::new(features.clone(), table, mm.gamma, mm.lambda, sets, schedule)?;
        if let (true, Some(prev)) = (mm.warm_start, &self.previous) {
            runner = runner.starting_at(prev)?;
        }
        let mut pairs = Vec::with_capacity(config.budget as usize);
        for _ in 0..config.budget {
            let s = sampler.sample(rng);
            runner.step(&s);
            pairs.push((s.pair(), mdp.reward(s.state, s.action)));
        }
        let average = runner.average();
        let w = average.table(features, mm.gamma);
        let grad = estimate_gradient_from_w(&pairs, &w, mdp.num_actions())?;
        self.previous = Some(average);
        Ok((grad, config.budget))
    }
}

fn cosine_distance(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    (na > 0.0 && nb > 0.0).then(|| 1.0 - a.dot(b) / (na * nb))
}

/// One seed of the configured estimator, starting from the uniform policy.
/// Record 0 is the initial policy; records `1..=K` follow each update.
pub fn train_seed(config: &ExperimentConfig, mdp: &TabularMdp, seed: u64) -> Result<Vec<TrainingRecord>> {
    let start = Instant::now();
    let mut rng = rng_stream(seed, config.estimator.stream());
    let mut policy = SoftmaxPolicy::uniform(mdp);
    let mut estimation = Estimation::new(mdp, config.estimator);
    let mut samples = 0;
    let record = |iteration, j1, gradient_error, samples_consumed| TrainingRecord {
        estimator: config.estimator,
        seed,
        iteration,
        j1,
        gradient_error,
        samples_consumed,
        wall_clock_ns: start.elapsed().as_nanos(),
    };
    let mut records = Vec::with_capacity(config.iterations + 1);
    records.push(record(0, policy_performance(mdp, &policy, 1.0)?, None, 0));
    for k in 1..=config.iterations {
        let mut step = || -> Result<_> {
            let exact = exact_policy_gradient_ldg(mdp, &policy, 1.0, config.theoretical.lambda)?.grad;
            let (grad, used) = estimation.estimate(config, mdp, &policy, &mut rng)?;
            Ok((exact, grad, used))
        };
        let (exact, grad, used) = step().map_err(|e: HarnessError| {
            e.context(format!("{} seed {seed} iteration {k}", config.estimator))
        })?;
        samples += used;
        let scale = match grad.norm() {
            n if config.normalize_gradient && n > 0.0 => config.learning_rate / n,
            _ => config.learning_rate,
        };
        policy.ascend(grad.as_slice(), scale);
        let j1 = policy_performance(mdp, &policy, 1.0)?;
        records.push(record(k, j1, cosine_distance(&grad, &exact), samples));
    }
    Ok(records)
}

/// All seeds of `config`, run in parallel, ordered by `(estimator, seed, iteration)`.
pub fn train(config: &ExperimentConfig) -> Result<Vec<TrainingRecord>> {
    config.validate()?;
    let mdp = load_env(&config.env)?;
    let mdp = &mdp;
    let results: Vec<Result<Vec<TrainingRecord>>> = std::thread::scope(|scope| {
        let handles: Vec<_> =
            config.seeds.iter().map(|&seed| scope.spawn(move || train_seed(config, mdp, seed))).collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    let mut records = Vec::new();
    for r in results {
        records.extend(r?);
    }
    sort_records(&mut records);
    Ok(records)
}

/// Runs `config` once per estimator and merges the record streams.
pub fn compare(config: &ExperimentConfig, estimators: &[Estimator]) -> Result<Vec<TrainingRecord>> {
    let mut records = Vec::new();
    for &estimator in estimators {
        let config = ExperimentConfig { estimator, ..config.clone() };
        records.extend(train(&config)?);
    }
    sort_records(&mut records);
    Ok(records)
}

pub fn sort_records(records: &mut [TrainingRecord]) {
    records.sort_by_key(|r| (r.estimator, r.seed, r.iteration));
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalSummary {
    pub estimator: Estimator,
    pub seeds: usize,
    pub mean_j1: f64,
    /// Sample variance across seeds of the final `J_1`.
    pub variance_j1: f64,
}

/// Mean and across-seed variance of each estimator's last recorded `J_1`.
pub fn final_summary(records: &[TrainingRecord]) -> Vec<FinalSummary> {
    let mut out = Vec::new();
    for estimator in Estimator::ALL {
        let mut last: std::collections::BTreeMap<u64, &TrainingRecord> = Default::default();
        for r in records.iter().filter(|r| r.estimator == estimator) {
            let slot = last.entry(r.seed).or_insert(r);
            if r.iteration > slot.iteration {
                *slot = r;
            }
        }
        if last.is_empty() {
            continue;
        }
        let vals: Vec<f64> = last.values().map(|r| r.j1).collect();
        let (mean, variance) = mean_variance(&vals);
        out.push(FinalSummary { estimator, seeds: vals.len(), mean_j1: mean, variance_j1: variance });
    }
    out
}

/// Mean and unbiased variance (0 for a single value).
pub fn mean_variance(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ldg_core::rng::rng_from_seed;

    fn bandit() -> TabularMdp {
        TabularMdp::new(1, 2, vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0], 1.0).unwrap()
    }

    #[test]
    fn reinforce_trivial_cases() {
        let m = bandit().with_rewards(vec![0.0, 0.0]).unwrap();
        let p = SoftmaxPolicy::uniform(&m);
        let g = gradient_reinforce(&m, &p, 0.9, 10, 5, &mut rng_from_seed(0)).unwrap();
        assert_eq!(g.amax(), 0.0);
        let single = TabularMdp::new(1, 1, vec![1.0], vec![1.0], vec![1.0], 1.0).unwrap();
        let g = gradient_reinforce(&single, &SoftmaxPolicy::uniform(&single), 0.9, 10, 5, &mut rng_from_seed(0)).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        assert!(ExperimentConfig::from_json(r#"{"estimator": "sarsa"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seeds": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"gamma_eval": 1.0}"#).is_err());
        let partial = ExperimentConfig::from_json(r#"{"minmax": {"step": {"kind": "inverse-sqrt", "c": 2.0}}}"#).unwrap();
        assert_eq!(partial.minmax.step, StepConfig::InverseSqrt { c: 2.0 });
    }

    #[test]
    fn summary_uses_last_iteration() {
        let rec = |seed, iteration, j1| TrainingRecord {
            estimator: Estimator::Reinforce,
            seed,
            iteration,
            j1,
            gradient_error: None,
            samples_consumed: 0,
            wall_clock_ns: 0,
        };
        let s = final_summary(&[rec(0, 0, 0.0), rec(0, 1, 1.0), rec(1, 1, 3.0), rec(1, 0, 9.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].mean_j1, s[0].variance_j1), (2.0, 2.0));
    }
}
