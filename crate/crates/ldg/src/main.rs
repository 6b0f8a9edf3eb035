use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ldg::error::{HarnessError, Result};
use ldg::harness::{compare, final_summary, train, Estimator, ExperimentConfig};
use ldg::io::{
    ensure_dir, load_env, write_grad_table, write_occupancy, write_rows, write_saddle_system, MinmaxLogPoint,
    TdCurvePoint,
};
use ldg::report::emit_report;
use ldg_core::exact::{
    exact_policy_gradient_classical, exact_policy_gradient_ldg, log_density_gradient_for, occupancy_for,
    policy_performance, residual_decomposition,
};
use ldg_core::minmax::{
    assemble_saddle_system, optimality_gap, solve_saddle_fixed_point, step_scale, ProjectedLdg, ProjectionSets,
    StepSchedule,
};
use ldg_core::rng::rng_from_seed;
use ldg_core::sampling::OccupancySampler;
use ldg_core::td::{center, run_td0_observed, Schedule};
use ldg_core::{FeatureMap, SoftmaxPolicy, TabularMdp};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ldg", version, about = "Log density gradient estimators on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `grid-<side>` or a path to an MDP JSON file [default: grid-3].
    #[arg(long)]
    env: Option<String>,
    /// Discount for the solve (defaults to the MDP's own discount).
    #[arg(long)]
    gamma: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact occupancy, log density gradient and policy gradients for the uniform policy.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Discount of the practical gradient in the residual decomposition.
        #[arg(long, default_value_t = 0.9)]
        gamma_eval: f64,
    },
    /// Backward TD(0) against the exact table.
    Td {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        iterations: u64,
        #[arg(long, default_value_t = 1_000)]
        stride: u64,
        #[arg(long, default_value_t = 1.0)]
        rm_a: f64,
        #[arg(long, default_value_t = 100.0)]
        rm_b: f64,
    },
    /// Projected saddle-point estimator with one-hot features.
    Minmax {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        iterations: u64,
        #[arg(long, default_value_t = 10_000)]
        stride: u64,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Scale `c` of the `c / (M* sqrt(t))` schedule.
        #[arg(long, default_value_t = 1.0)]
        step_c: f64,
        /// Constant step size; overrides `--step-c`.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Policy optimisation with the configured estimator.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Policy optimisation with several estimators on the same config.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "reinforce,theoretical-pg,theoretical-ldg,minmax-ldg")]
        estimators: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Solve { common, lambda, gamma_eval } => solve(&common, lambda, gamma_eval),
        Command::Td { common, iterations, stride, rm_a, rm_b } => {
            td(&common, iterations, stride, Schedule::RobbinsMonro { a: rm_a, b: rm_b })
        }
        Command::Minmax { common, iterations, stride, lambda, step_c, eps } => {
            minmax(&common, iterations, stride, lambda, step_c, eps)
        }
        Command::Train { common } => {
            let config = experiment(&common)?;
            finish_training(&common, train(&config)?)
        }
        Command::Compare { common, estimators } => {
            let config = experiment(&common)?;
            let estimators = estimators.iter().map(|s| s.parse()).collect::<Result<Vec<Estimator>>>()?;
            finish_training(&common, compare(&config, &estimators)?)
        }
    }
}

impl Common {
    fn env(&self) -> &str {
        self.env.as_deref().unwrap_or("grid-3")
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn env_and_gamma(common: &Common) -> Result<(TabularMdp, f64)> {
    let mdp = load_env(common.env())?;
    let gamma = common.gamma.unwrap_or(mdp.discount());
    Ok((mdp, gamma))
}

fn out_dir(common: &Common) -> Result<Option<&Path>> {
    if let Some(dir) = &common.out {
        ensure_dir(dir)?;
    }
    Ok(common.out.as_deref())
}

fn solve(common: &Common, lambda: f64, gamma_eval: f64) -> Result<()> {
    let (mdp, gamma) = env_and_gamma(common)?;
    let policy = SoftmaxPolicy::uniform(&mdp);
    let table = policy.table();
    let occupancy = occupancy_for(&mdp, &table, gamma)?;
    let ldg = exact_policy_gradient_ldg(&mdp, &policy, gamma, lambda)?;
    let classical = if gamma < 1.0 { Some(exact_policy_gradient_classical(&mdp, &policy, gamma)?.grad) } else { None };
    let decomposition = residual_decomposition(&mdp, &policy, gamma_eval, lambda)?;
    let residual = decomposition.residual_term.expect("decomposition carries the residual");
    let exact_j1 = exact_policy_gradient_ldg(&mdp, &policy, 1.0, lambda)?.grad;
    let summary = json!({
        "env": common.env(),
        "gamma": gamma,
        "J": policy_performance(&mdp, &policy, gamma)?,
        "J1": policy_performance(&mdp, &policy, 1.0)?,
        "grad_ldg": ldg.grad.as_slice(),
        "grad_classical": classical.as_ref().map(|g| g.as_slice().to_vec()),
        "gamma_eval": gamma_eval,
        "residual_ratio": residual.norm() / exact_j1.norm(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
    if let Some(dir) = out_dir(common)? {
        write_occupancy(&dir.join("occupancy.csv"), &occupancy)?;
        if occupancy.require_positive().is_ok() {
            let w = log_density_gradient_for(&mdp, &table, &occupancy, lambda)?;
            write_grad_table(&dir.join("grad_table.csv"), &w, mdp.num_actions())?;
        }
        let path = dir.join("summary.json");
        std::fs::write(&path, summary.to_string()).map_err(|e| HarnessError::io(&path, e))?;
    }
    Ok(())
}

fn td(common: &Common, iterations: u64, stride: u64, schedule: Schedule) -> Result<()> {
    let (mdp, gamma) = env_and_gamma(common)?;
    let policy = SoftmaxPolicy::uniform(&mdp);
    let table = policy.table();
    let occupancy = occupancy_for(&mdp, &table, gamma)?;
    let exact = log_density_gradient_for(&mdp, &table, &occupancy, 1.0)?;
    let start = Instant::now();
    let mut curve = Vec::new();
    let mut rng = rng_from_seed(common.seed());
    let w = run_td0_observed(&mdp, &policy, gamma, iterations, schedule, &mut rng, stride, |t, w| {
        let mut w = w.clone();
        if gamma == 1.0 {
            center(&mut w, &occupancy);
        }
        curve.push(TdCurvePoint {
            iteration: t,
            weighted_l1_error: w.weighted_l1_distance(&exact, &occupancy),
            wall_clock_ns: start.elapsed().as_nanos(),
        });
    })?;
    let error = w.weighted_l1_distance(&exact, &occupancy);
    println!("{}", json!({"env": common.env(), "gamma": gamma, "iterations": iterations, "weighted_l1_error": error}));
    if let Some(dir) = out_dir(common)? {
        write_rows(&dir.join("td_curve.csv"), &curve)?;
        write_grad_table(&dir.join("td_table.csv"), &w, mdp.num_actions())?;
    }
    Ok(())
}

fn minmax(common: &Common, iterations: u64, stride: u64, lambda: f64, step_c: f64, eps: Option<f64>) -> Result<()> {
    let (mdp, gamma) = env_and_gamma(common)?;
    let policy = SoftmaxPolicy::uniform(&mdp);
    let table = policy.table();
    let occupancy = occupancy_for(&mdp, &table, gamma)?;
    let features = FeatureMap::one_hot(mdp.num_pairs());
    let system = assemble_saddle_system(&mdp, &table, &occupancy, &features, lambda)?;
    let star = solve_saddle_fixed_point(&system)?;
    let sets = ProjectionSets::default_for(Some(&star));
    let schedule = match eps {
        Some(e) => StepSchedule::Constant(e),
        None => StepSchedule::InverseSqrt {
            c: step_c,
            m_star: step_scale(&mdp, &table, &occupancy, &features, &sets, lambda)?,
        },
    };
    let mut sampler = OccupancySampler::exact(&mdp, &table, &occupancy)?;
    let mut runner = ProjectedLdg::new(features.clone(), table, gamma, lambda, sets, schedule)?;
    let mut rng = rng_from_seed(common.seed());
    let start = Instant::now();
    let mut log = Vec::new();
    for t in 1..=iterations {
        runner.step(&sampler.sample(&mut rng));
        if (stride > 0 && t % stride == 0) || t == iterations {
            let avg = runner.average();
            log.push(MinmaxLogPoint {
                iteration: t,
                distance_to_fixed_point: Some(avg.distance(&star)),
                optimality_gap: Some(optimality_gap(&system, &sets, &avg)),
                wall_clock_ns: start.elapsed().as_nanos(),
            });
        }
    }
    let last = log.last().expect("at least one log point");
    println!(
        "{}",
        json!({
            "env": common.env(), "gamma": gamma, "lambda": lambda, "iterations": iterations,
            "distance_to_fixed_point": last.distance_to_fixed_point, "optimality_gap": last.optimality_gap,
        })
    );
    if let Some(dir) = out_dir(common)? {
        write_rows(&dir.join("run_log.csv"), &log)?;
        let saddle = dir.join("saddle");
        ensure_dir(&saddle)?;
        write_saddle_system(&saddle, &system)?;
        let w = runner.average().table(&features, gamma);
        write_grad_table(&dir.join("w_table.csv"), &w, mdp.num_actions())?;
    }
    Ok(())
}

fn experiment(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(env) = &common.env {
        config.env = env.clone();
    }
    if let Some(g) = common.gamma {
        config.gamma_eval = g;
    }
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn finish_training(common: &Common, records: Vec<ldg::TrainingRecord>) -> Result<()> {
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    emit_report(&records, &out)?;
    for s in final_summary(&records) {
        println!(
            "{}",
            json!({"estimator": s.estimator.name(), "seeds": s.seeds, "final_mean_J1": s.mean_j1, "final_var_J1": s.variance_j1})
        );
    }
    Ok(())
}
