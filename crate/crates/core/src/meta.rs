//! First-order meta-learning of a trust threshold.
//!
//! The meta threshold `tau_meta` is trained so that one projected SPSA step,
//! `tau_theta = P[tau_meta - gamma * g_theta(tau_meta)]`, lands near a good
//! threshold for whichever scenario `theta` is encountered. Each iteration
//! samples a batch of scenarios, adapts to each, re-estimates the gradient at
//! the adapted threshold, and descends `tau_meta` by the batch average (the
//! Hessian term of the exact meta-gradient is dropped).
//!
//! In robust mode the scenario weights are trained adversarially: after each
//! iteration the weight of every sampled scenario is increased by `beta_t`
//! times its estimated post-adaptation cost and projected back onto the
//! simplex, and the next batch is drawn from the updated weights.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pomdp::{Model, PomdpConfig, PomdpError, Scenario, ThresholdPolicy};
use crate::seed;
use crate::spsa::{project_unit_interval, spsa_gradient, ScheduleError, SpsaSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaError {
    #[error(transparent)]
    Pomdp(#[from] PomdpError),

    #[error(transparent)]
    Schedule(#[from] ScheduleError),

    #[error("scenario set is empty")]
    EmptyScenarioSet,

    #[error("scenario {index} ({scenario:?}) is outside the threshold regime")]
    InvalidScenario { index: usize, scenario: Scenario },

    #[error("invalid {field}: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
}

/// Estimated expected discounted cost of a threshold in a scenario.
///
/// Calls that pass the same `seed` must share their random numbers, so that
/// differences between thresholds are not swamped by sampling noise.
pub trait ScenarioObjective: Sync {
    fn value(&self, theta: &Scenario, tau: f64, seed: u64) -> Result<f64, PomdpError>;
}

/// Mean of `n_rollouts` simulated discounted costs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloObjective {
    pub config: PomdpConfig,
    pub n_rollouts: usize,
}

impl MonteCarloObjective {
    pub const DEFAULT_ROLLOUTS: usize = 100;

    pub fn new(config: PomdpConfig, n_rollouts: usize) -> Result<Self, MetaError> {
        config.validate()?;
        if n_rollouts == 0 {
            return Err(MetaError::InvalidArgument {
                field: "n_rollouts",
                reason: "must be at least 1".into(),
            });
        }
        Ok(MonteCarloObjective { config, n_rollouts })
    }
}

impl ScenarioObjective for MonteCarloObjective {
    fn value(&self, theta: &Scenario, tau: f64, seed: u64) -> Result<f64, PomdpError> {
        let est =
            Model::new(theta, &self.config).value_estimate(ThresholdPolicy::clamped(tau), self.n_rollouts, seed)?;
        Ok(est.mean)
    }
}

/// Tags for the last element of a seed path.
pub(crate) mod purpose {
    pub const DIRECTION: u64 = 0;
    pub const EVALUATION: u64 = 1;
    pub const PRE_ADAPTATION: u64 = 2;
    pub const POST_ADAPTATION: u64 = 3;
    pub const VALUE: u64 = 4;
    pub const BATCH: u64 = 5;
}

/// A finite, ordered sample of scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
    pub provenance: String,
}

impl ScenarioSet {
    pub fn new(scenarios: Vec<Scenario>, provenance: impl Into<String>) -> Result<Self, MetaError> {
        if scenarios.is_empty() {
            return Err(MetaError::EmptyScenarioSet);
        }
        if let Some((index, scenario)) = scenarios.iter().enumerate().find(|(_, s)| !s.is_threshold_regime()) {
            return Err(MetaError::InvalidScenario {
                index,
                scenario: *scenario,
            });
        }
        Ok(ScenarioSet {
            scenarios,
            provenance: provenance.into(),
        })
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// Scenarios drawn uniformly; minimizes the average adapted cost.
    Agnostic,
    /// Scenario weights trained by projected gradient ascent; minimizes the
    /// worst-case adapted cost.
    Robust,
}

/// Result of one projected SPSA adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Adaptation {
    pub tau_adapted: f64,
    pub gradient: f64,
}

/// One SPSA gradient estimate at `tau`. The direction comes from the
/// `DIRECTION` substream of `seed` and both evaluations share its
/// `EVALUATION` substream.
pub fn spsa_at<O: ScenarioObjective + ?Sized>(
    objective: &O,
    theta: &Scenario,
    tau: f64,
    eta: f64,
    seed: u64,
) -> Result<f64, PomdpError> {
    let eval_seed = seed::derive_seed(seed, &[purpose::EVALUATION]);
    let mut rng = seed::substream(seed, &[purpose::DIRECTION]);
    spsa_gradient(|x| objective.value(theta, x, eval_seed), tau, eta, &mut rng)
}

/// `tau_adapted = P[tau - gamma * g]` with `g` the SPSA gradient at `tau`.
pub fn adapt<O: ScenarioObjective + ?Sized>(
    objective: &O,
    theta: &Scenario,
    tau: f64,
    eta: f64,
    gamma: f64,
    seed: u64,
) -> Result<Adaptation, PomdpError> {
    let gradient = spsa_at(objective, theta, tau, eta, seed)?;
    Ok(Adaptation {
        tau_adapted: project_unit_interval(tau - gamma * gradient),
        gradient,
    })
}

/// Work done for one batch slot in one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    /// Index into the scenario set.
    pub index: usize,
    /// Gradient at `tau_meta`.
    pub pre_gradient: f64,
    pub tau_adapted: f64,
    /// Gradient at `tau_adapted`; these drive the meta update.
    pub post_gradient: f64,
    /// Estimated cost at `tau_adapted` (robust mode only).
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration number; the schedules are evaluated at this index.
    pub iter: u64,
    pub tau_before: f64,
    pub tau_meta: f64,
    /// Largest `|pre_gradient|` in the batch.
    pub stop_metric: f64,
    pub outcomes: Vec<ScenarioOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainerState {
    pub tau_meta: f64,
    /// Completed iterations.
    pub t: u64,
    /// Sampling weights over the scenario set.
    pub weights: Vec<f64>,
    pub mode: MetaMode,
    pub schedule: SpsaSchedule,
    pub master_seed: u64,
    pub history: Vec<IterationRecord>,
    /// Consecutive iterations on which the stopping rule has held.
    pub stop_streak: usize,
}

impl MetaTrainerState {
    pub fn new(tau_init: f64, n_scenarios: usize, mode: MetaMode, schedule: SpsaSchedule, master_seed: u64) -> Self {
        MetaTrainerState {
            tau_meta: project_unit_interval(tau_init),
            t: 0,
            weights: uniform(n_scenarios),
            mode,
            schedule,
            master_seed,
            history: Vec::new(),
            stop_streak: 0,
        }
    }
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn evaluate_slot<O: ScenarioObjective + ?Sized>(
    objective: &O,
    theta: &Scenario,
    index: usize,
    tau_meta: f64,
    schedule: &SpsaSchedule,
    iter: u64,
    slot_seed: u64,
    with_value: bool,
) -> Result<ScenarioOutcome, PomdpError> {
    let eta = schedule.eta(iter);
    let pre = adapt(
        objective,
        theta,
        tau_meta,
        eta,
        schedule.gamma,
        seed::derive_seed(slot_seed, &[purpose::PRE_ADAPTATION]),
    )?;
    let post_gradient = spsa_at(
        objective,
        theta,
        pre.tau_adapted,
        eta,
        seed::derive_seed(slot_seed, &[purpose::POST_ADAPTATION]),
    )?;
    let value = if with_value {
        Some(objective.value(theta, pre.tau_adapted, seed::derive_seed(slot_seed, &[purpose::VALUE]))?)
    } else {
        None
    };
    Ok(ScenarioOutcome {
        index,
        pre_gradient: pre.gradient,
        tau_adapted: pre.tau_adapted,
        post_gradient,
        value,
    })
}

fn run_iteration<O: ScenarioObjective + ?Sized>(
    state: &mut MetaTrainerState,
    set: &ScenarioSet,
    batch: &[usize],
    objective: &O,
    with_values: bool,
) -> Result<(), MetaError> {
    if batch.is_empty() {
        return Err(MetaError::InvalidArgument {
            field: "batch",
            reason: "must not be empty".into(),
        });
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= set.len()) {
        return Err(MetaError::InvalidArgument {
            field: "batch",
            reason: format!("index {bad} out of range for {} scenarios", set.len()),
        });
    }
    let iter = state.t + 1;
    let tau_before = state.tau_meta;
    let schedule = state.schedule;
    let master = state.master_seed;
    let outcomes = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &index)| {
            let slot_seed = seed::derive_seed(master, &[iter, slot as u64]);
            evaluate_slot(
                objective,
                &set.scenarios()[index],
                index,
                tau_before,
                &schedule,
                iter,
                slot_seed,
                with_values,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mean_post = outcomes.iter().map(|o| o.post_gradient).sum::<f64>() / outcomes.len() as f64;
    state.tau_meta = project_unit_interval(tau_before - schedule.alpha(iter) * mean_post);
    let stop_metric = outcomes.iter().map(|o| o.pre_gradient.abs()).fold(0.0, f64::max);
    state.t = iter;
    state.history.push(IterationRecord {
        iter,
        tau_before,
        tau_meta: state.tau_meta,
        stop_metric,
        outcomes,
    });
    Ok(())
}

/// One meta-descent iteration over `batch` (indices into `set`).
///
/// Every scenario is adapted from the current `tau_meta`, the gradient is
/// re-estimated at the adapted threshold, and `tau_meta` moves by `-alpha_t`
/// times the batch mean of those gradients, projected onto `[0, 1]`.
pub fn foml_step<O: ScenarioObjective + ?Sized>(
    mut state: MetaTrainerState,
    set: &ScenarioSet,
    batch: &[usize],
    objective: &O,
) -> Result<MetaTrainerState, MetaError> {
    run_iteration(&mut state, set, batch, objective, false)?;
    Ok(state)
}

/// Euclidean projection onto the probability simplex.
///
/// Sorts `v` in decreasing order, finds the largest `k` with
/// `u_k - (sum_{j<=k} u_j - 1) / k > 0`, and shifts every entry down by that
/// threshold, clamping at zero.
pub fn simplex_project(v: &[f64]) -> Vec<f64> {
    assert!(!v.is_empty(), "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            shift = candidate;
        }
    }
    v.iter().map(|&x| (x - shift).max(0.0)).collect()
}

/// Gradient ascent on scenario weights: adds `beta * value` to the weight of
/// each evaluated scenario (repeated indices accumulate) and projects back
/// onto the simplex.
pub fn sga_step(weights: &[f64], values: &[(usize, f64)], beta: f64) -> Vec<f64> {
    let mut raised = weights.to_vec();
    for &(index, value) in values {
        raised[index] += beta * value;
    }
    simplex_project(&raised)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub mode: MetaMode,
    pub batch_size: usize,
    pub max_iters: u64,
    /// Consecutive iterations the stopping rule must hold before training
    /// ends; 1 stops on the first.
    pub stop_window: usize,
    pub tau_init: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            mode: MetaMode::Agnostic,
            batch_size: 10,
            max_iters: 2000,
            stop_window: 3,
            tau_init: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub tau_meta: f64,
    /// False when `max_iters` ran out before the stopping rule fired.
    pub converged: bool,
    pub state: MetaTrainerState,
}

fn sample_batch(state: &MetaTrainerState, batch_size: usize) -> Vec<usize> {
    let mut rng = seed::substream(state.master_seed, &[state.t + 1, purpose::BATCH]);
    match state.mode {
        MetaMode::Agnostic => index::sample(&mut rng, state.weights.len(), batch_size).into_vec(),
        MetaMode::Robust => {
            let dist = WeightedIndex::new(&state.weights).expect("weights lie on the simplex");
            (0..batch_size).map(|_| dist.sample(&mut rng)).collect()
        }
    }
}

/// Runs meta-training until every batch gradient at `tau_meta` is within
/// `epsilon` on `stop_window` consecutive iterations, or `max_iters` is hit.
pub fn train<O: ScenarioObjective + ?Sized>(
    set: &ScenarioSet,
    objective: &O,
    schedule: SpsaSchedule,
    options: TrainOptions,
    master_seed: u64,
) -> Result<TrainOutcome, MetaError> {
    schedule.validate()?;
    let invalid = |field, reason: &str| {
        Err(MetaError::InvalidArgument {
            field,
            reason: reason.to_string(),
        })
    };
    if options.batch_size == 0 || options.batch_size > set.len() {
        return invalid("batch_size", "must be between 1 and the number of scenarios");
    }
    if options.max_iters == 0 {
        return invalid("max_iters", "must be at least 1");
    }
    if options.stop_window == 0 {
        return invalid("stop_window", "must be at least 1");
    }
    if !(0.0..=1.0).contains(&options.tau_init) {
        return invalid("tau_init", "must lie in [0, 1]");
    }

    let robust = options.mode == MetaMode::Robust;
    let mut state = MetaTrainerState::new(options.tau_init, set.len(), options.mode, schedule, master_seed);
    let mut converged = false;
    while state.t < options.max_iters {
        let batch = sample_batch(&state, options.batch_size);
        run_iteration(&mut state, set, &batch, objective, robust)?;
        let record = state.history.last().expect("iteration recorded");
        if robust {
            let values: Vec<(usize, f64)> = record
                .outcomes
                .iter()
                .map(|o| (o.index, o.value.expect("robust iterations estimate values")))
                .collect();
            state.weights = sga_step(&state.weights, &values, schedule.beta(record.iter));
        }
        if record.stop_metric <= schedule.epsilon {
            state.stop_streak += 1;
        } else {
            state.stop_streak = 0;
        }
        if state.stop_streak >= options.stop_window {
            converged = true;
            break;
        }
    }
    Ok(TrainOutcome {
        tau_meta: state.tau_meta,
        converged,
        state,
    })
}
