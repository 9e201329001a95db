//! Evaluation harness.
//!
//! Grid-search optimal thresholds, the distribution-average baseline,
//! seed-replicated evaluation of adapted and fixed thresholds over held-out
//! scenario sets, and sweep tables of thresholds against a scenario parameter.
//!
//! All comparisons use common random numbers: grid points share one seed, and
//! within one evaluation seed every policy sees the same rollouts in a given
//! scenario.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{adapt, MetaError, MonteCarloObjective, ScenarioObjective, ScenarioSet};
use crate::pomdp::{PomdpConfig, PomdpError, RunningStats, Scenario, ScenarioField};
use crate::scenario_dist::ScenarioDistribution;
use crate::seed;
use crate::spsa::SpsaSchedule;

pub const DEFAULT_GRID_STEP: f64 = 0.01;

/// Evaluation-seed path tags.
mod purpose {
    pub const ADAPT: u64 = 0;
    pub const VALUE: u64 = 1;
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Pomdp(#[from] PomdpError),

    #[error(transparent)]
    Meta(#[from] MetaError),

    #[error("invalid {field}: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
}

fn invalid<T>(field: &'static str, reason: impl Into<String>) -> Result<T, EvalError> {
    Err(EvalError::InvalidArgument {
        field,
        reason: reason.into(),
    })
}

/// Minimizer found by [`optimal_threshold_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub tau: f64,
    pub cost: f64,
}

/// `{0, step, 2 step, ..., 1}`; 1 is always included.
pub fn threshold_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| (i as f64 * step).min(1.0)).collect();
    if 1.0 - grid[n] > 1e-9 {
        grid.push(1.0);
    } else {
        grid[n] = 1.0;
    }
    grid
}

/// Smallest-`tau` minimizer of `costs` over `points`.
fn argmin(points: &[f64], costs: &[f64]) -> ThresholdSearch {
    let mut best = ThresholdSearch {
        tau: points[0],
        cost: costs[0],
    };
    for (&tau, &cost) in points.iter().zip(costs).skip(1) {
        if cost < best.cost || (cost == best.cost && tau < best.tau) {
            best = ThresholdSearch { tau, cost };
        }
    }
    best
}

/// Grid search over `tau`, minimizing `cost(tau)`, followed by one refinement
/// pass at `grid_step / 10` within one grid step of the incumbent.
fn grid_search<F>(grid_step: f64, cost: F) -> Result<ThresholdSearch, EvalError>
where
    F: Fn(f64) -> Result<f64, EvalError> + Sync,
{
    if !(grid_step > 0.0 && grid_step <= 0.1) {
        return invalid("grid_step", format!("{grid_step} is not in (0, 0.1]"));
    }
    let evaluate = |points: &[f64]| -> Result<Vec<f64>, EvalError> { points.par_iter().map(|&t| cost(t)).collect() };
    let coarse = threshold_grid(grid_step);
    let incumbent = argmin(&coarse, &evaluate(&coarse)?);

    let fine_step = grid_step / 10.0;
    let mut fine = vec![incumbent.tau];
    for k in 1..10 {
        let offset = k as f64 * fine_step;
        for candidate in [incumbent.tau - offset, incumbent.tau + offset] {
            if (0.0..=1.0).contains(&candidate) {
                fine.push(candidate);
            }
        }
    }
    let costs = evaluate(&fine)?;
    Ok(argmin(&fine, &costs))
}

/// Cost-minimizing threshold for one scenario. Every grid point is evaluated
/// with the same `seed`.
pub fn optimal_threshold_with<O: ScenarioObjective + ?Sized>(
    objective: &O,
    theta: &Scenario,
    grid_step: f64,
    seed: u64,
) -> Result<ThresholdSearch, EvalError> {
    grid_search(grid_step, |tau| Ok(objective.value(theta, tau, seed)?))
}

/// [`optimal_threshold_with`] using Monte Carlo estimates from `n_rollouts`
/// rollouts per point.
pub fn optimal_threshold(
    theta: &Scenario,
    config: &PomdpConfig,
    grid_step: f64,
    n_rollouts: usize,
    seed: u64,
) -> Result<ThresholdSearch, EvalError> {
    let objective = MonteCarloObjective::new(*config, n_rollouts)?;
    optimal_threshold_with(&objective, theta, grid_step, seed)
}

/// Optimal threshold at the mean scenario of `dist`.
pub fn avg_baseline_threshold<O: ScenarioObjective + ?Sized>(
    dist: &ScenarioDistribution,
    objective: &O,
    grid_step: f64,
    seed: u64,
) -> Result<ThresholdSearch, EvalError> {
    optimal_threshold_with(objective, &dist.mean_scenario(), grid_step, seed)
}

/// Single threshold minimizing the average cost over `set`.
pub fn expected_cost_threshold<O: ScenarioObjective + ?Sized>(
    objective: &O,
    set: &ScenarioSet,
    grid_step: f64,
    seed: u64,
) -> Result<ThresholdSearch, EvalError> {
    let n = set.len() as f64;
    grid_search(grid_step, |tau| {
        let mut total = 0.0;
        for (i, theta) in set.scenarios().iter().enumerate() {
            total += objective.value(theta, tau, seed::derive_seed(seed, &[i as u64]))?;
        }
        Ok(total / n)
    })
}

/// A threshold under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub label: String,
    pub tau: f64,
    /// Whether to take one projected SPSA step in each scenario before
    /// evaluating.
    pub adapt: bool,
}

impl PolicySpec {
    pub fn adapted(label: impl Into<String>, tau: f64) -> Self {
        PolicySpec {
            label: label.into(),
            tau,
            adapt: true,
        }
    }

    pub fn fixed(label: impl Into<String>, tau: f64) -> Self {
        PolicySpec {
            label: label.into(),
            tau,
            adapt: false,
        }
    }
}

/// Per-seed, per-policy, per-scenario costs and deployed thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub policies: Vec<PolicySpec>,
    pub scenarios: Vec<Scenario>,
    pub seeds: Vec<u64>,
    /// `cost[seed][policy][scenario]`.
    pub cost: Vec<Vec<Vec<f64>>>,
    /// `tau[seed][policy][scenario]`, after adaptation where it applies.
    pub tau: Vec<Vec<Vec<f64>>>,
}

/// Evaluation seed `r` of a run with master `seed`.
pub fn evaluation_seeds(seed: u64, n_seeds: usize) -> Vec<u64> {
    (0..n_seeds as u64).map(|r| seed::derive_seed(seed, &[r])).collect()
}

/// Evaluates every policy in every scenario under `n_seeds` seeds.
///
/// Adaptation is one projected SPSA step with the first perturbation size of
/// `schedule` and its `gamma`. Within a seed and scenario, every policy's cost
/// is estimated from the same rollouts, and every adapted policy uses the same
/// perturbation direction and noise.
pub fn cost_table<O: ScenarioObjective + ?Sized>(
    policies: &[PolicySpec],
    scenarios: &[Scenario],
    objective: &O,
    schedule: &SpsaSchedule,
    n_seeds: usize,
    seed: u64,
) -> Result<CostTable, EvalError> {
    schedule.validate().map_err(MetaError::from)?;
    if n_seeds == 0 {
        return invalid("n_seeds", "must be at least 1");
    }
    if policies.is_empty() {
        return invalid("policies", "nothing to evaluate");
    }
    if scenarios.is_empty() {
        return invalid("scenarios", "nothing to evaluate on");
    }
    if let Some(p) = policies.iter().find(|p| !(0.0..=1.0).contains(&p.tau)) {
        return invalid("tau", format!("{} for `{}` is outside [0, 1]", p.tau, p.label));
    }
    let eta = schedule.eta(1);
    let seeds = evaluation_seeds(seed, n_seeds);
    let mut cost = Vec::with_capacity(n_seeds);
    let mut tau = Vec::with_capacity(n_seeds);
    for &run_seed in &seeds {
        // [scenario][policy]
        let cells = scenarios
            .par_iter()
            .enumerate()
            .map(|(i, theta)| {
                let adapt_seed = seed::derive_seed(run_seed, &[i as u64, purpose::ADAPT]);
                let value_seed = seed::derive_seed(run_seed, &[i as u64, purpose::VALUE]);
                policies
                    .iter()
                    .map(|p| {
                        let deployed = if p.adapt {
                            adapt(objective, theta, p.tau, eta, schedule.gamma, adapt_seed)?.tau_adapted
                        } else {
                            p.tau
                        };
                        Ok((deployed, objective.value(theta, deployed, value_seed)?))
                    })
                    .collect::<Result<Vec<(f64, f64)>, EvalError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        cost.push(transpose(&cells, |c| c.1));
        tau.push(transpose(&cells, |c| c.0));
    }
    Ok(CostTable {
        policies: policies.to_vec(),
        scenarios: scenarios.to_vec(),
        seeds,
        cost,
        tau,
    })
}

fn transpose(cells: &[Vec<(f64, f64)>], pick: impl Fn(&(f64, f64)) -> f64) -> Vec<Vec<f64>> {
    let n_policies = cells[0].len();
    (0..n_policies)
        .map(|p| cells.iter().map(|row| pick(&row[p])).collect())
        .collect()
}

/// Mean, sample standard deviation and count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std_dev: f64,
    pub n: usize,
}

impl FromIterator<f64> for Summary {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let stats: RunningStats = iter.into_iter().collect();
        Summary {
            mean: stats.mean(),
            std_dev: stats.std_dev(),
            n: stats.count(),
        }
    }
}

impl CostTable {
    pub fn n_seeds(&self) -> usize {
        self.seeds.len()
    }

    /// Per-seed expected cost of `policy` under scenario `weights`.
    pub fn weighted_costs(&self, policy: usize, weights: &[f64]) -> Vec<f64> {
        assert_eq!(weights.len(), self.scenarios.len(), "one weight per scenario");
        self.cost
            .iter()
            .map(|by_policy| by_policy[policy].iter().zip(weights).map(|(c, w)| c * w).sum())
            .collect()
    }

    /// Mean and spread over seeds of the `weights`-weighted cost of `policy`.
    pub fn summarize(&self, policy: usize, weights: &[f64]) -> Summary {
        self.weighted_costs(policy, weights).into_iter().collect()
    }

    /// Cost of `policy` in scenario `i`, averaged over seeds.
    pub fn mean_cost(&self, policy: usize, i: usize) -> f64 {
        self.cost.iter().map(|c| c[policy][i]).sum::<f64>() / self.n_seeds() as f64
    }

    pub fn mean_tau(&self, policy: usize, i: usize) -> f64 {
        self.tau.iter().map(|t| t[policy][i]).sum::<f64>() / self.n_seeds() as f64
    }

    fn uniform(&self) -> Vec<f64> {
        vec![1.0 / self.scenarios.len() as f64; self.scenarios.len()]
    }
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub label: String,
    pub mean_cost: f64,
    pub std_dev: f64,
    pub n_seeds: usize,
    pub n_test_scenarios: usize,
}

/// Cost of one policy in one test scenario, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub label: String,
    pub scenario_index: usize,
    pub scenario: Scenario,
    pub tau: f64,
    pub cost: f64,
}

/// What is needed to regenerate a report.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub evaluation_seeds: Vec<u64>,
    /// Filled in by callers that know the run configuration.
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<PolicyRow>,
    pub details: Vec<DetailRow>,
    pub provenance: Provenance,
}

impl EvaluationReport {
    pub fn row(&self, label: &str) -> Option<&PolicyRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Uniform average over the table's scenarios.
    pub fn from_table(table: &CostTable, master_seed: u64) -> Self {
        let weights = table.uniform();
        let n = table.scenarios.len();
        let rows = (0..table.policies.len())
            .map(|p| {
                let s = table.summarize(p, &weights);
                PolicyRow {
                    label: table.policies[p].label.clone(),
                    mean_cost: s.mean,
                    std_dev: s.std_dev,
                    n_seeds: s.n,
                    n_test_scenarios: n,
                }
            })
            .collect();
        let details = (0..table.policies.len())
            .flat_map(|p| {
                (0..n).map(move |i| DetailRow {
                    label: table.policies[p].label.clone(),
                    scenario_index: i,
                    scenario: table.scenarios[i],
                    tau: table.mean_tau(p, i),
                    cost: table.mean_cost(p, i),
                })
            })
            .collect();
        EvaluationReport {
            rows,
            details,
            provenance: Provenance {
                master_seed,
                evaluation_seeds: table.seeds.clone(),
                config_digest: None,
            },
        }
    }
}

pub const META_LABEL: &str = "meta_adapted";
pub const AVG_LABEL: &str = "distribution_average";

/// Average cost over `test_set` of `tau_meta` after one-shot adaptation in
/// each scenario, against the fixed threshold `tau_avg`, replicated over
/// `n_seeds` seeds.
pub fn evaluate_policies<O: ScenarioObjective + ?Sized>(
    tau_meta: f64,
    tau_avg: f64,
    test_set: &ScenarioSet,
    objective: &O,
    schedule: &SpsaSchedule,
    n_seeds: usize,
    seed: u64,
) -> Result<EvaluationReport, EvalError> {
    let policies = [
        PolicySpec::adapted(META_LABEL, tau_meta),
        PolicySpec::fixed(AVG_LABEL, tau_avg),
    ];
    let table = cost_table(&policies, test_set.scenarios(), objective, schedule, n_seeds, seed)?;
    Ok(EvaluationReport::from_table(&table, seed))
}

/// One row of a threshold-versus-parameter table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param_value: f64,
    pub tau_mean: f64,
    pub tau_std: f64,
}

/// One-shot adaptations of `tau_meta` at every grid scenario, `n_repeats`
/// times each. Repeat `r` uses the same seed at every grid point.
pub fn sweep_adapted_thresholds<O: ScenarioObjective + ?Sized>(
    tau_meta: f64,
    grid: &[Scenario],
    field: ScenarioField,
    objective: &O,
    schedule: &SpsaSchedule,
    n_repeats: usize,
    seed: u64,
) -> Result<Vec<SweepRow>, EvalError> {
    schedule.validate().map_err(MetaError::from)?;
    if n_repeats == 0 {
        return invalid("n_repeats", "must be at least 1");
    }
    let eta = schedule.eta(1);
    let seeds = evaluation_seeds(seed, n_repeats);
    grid.par_iter()
        .map(|theta| {
            let taus = seeds
                .iter()
                .map(|&s| Ok(adapt(objective, theta, tau_meta, eta, schedule.gamma, s)?.tau_adapted))
                .collect::<Result<Vec<f64>, EvalError>>()?;
            let s: Summary = taus.into_iter().collect();
            Ok(SweepRow {
                param_value: theta.get(field),
                tau_mean: s.mean,
                tau_std: s.std_dev,
            })
        })
        .collect()
}

/// Optimal threshold at every grid scenario, all searched with the same seed.
pub fn sweep_optimal_thresholds<O: ScenarioObjective + ?Sized>(
    grid: &[Scenario],
    field: ScenarioField,
    objective: &O,
    grid_step: f64,
    seed: u64,
) -> Result<Vec<(f64, ThresholdSearch)>, EvalError> {
    grid.iter()
        .map(|theta| {
            Ok((
                theta.get(field),
                optimal_threshold_with(objective, theta, grid_step, seed)?,
            ))
        })
        .collect()
}

/// How test scenarios are weighted in a robustness comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// The empirical distribution's own weights.
    Empirical,
    /// Point mass on the scenario where the distribution-average threshold
    /// costs the most.
    WorstCase,
    /// Final scenario weights of a robust training run.
    Trained,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Weighting::Empirical => "empirical",
            Weighting::WorstCase => "worst_case",
            Weighting::Trained => "trained_weights",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub weighting: Weighting,
    pub policy: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    pub worst_case_index: usize,
    pub worst_case_scenario: Scenario,
    pub provenance: Provenance,
}

impl RobustnessReport {
    pub fn get(&self, weighting: Weighting, policy: &str) -> Option<&Summary> {
        self.rows
            .iter()
            .find(|r| r.weighting == weighting && r.policy == policy)
            .map(|r| &r.summary)
    }

    /// Rows labelled `policy@weighting`, in the shape of [`PolicyRow`].
    pub fn policy_rows(&self) -> Vec<PolicyRow> {
        self.rows
            .iter()
            .map(|r| PolicyRow {
                label: format!("{}@{}", r.policy, r.weighting.name()),
                mean_cost: r.summary.mean,
                std_dev: r.summary.std_dev,
                n_seeds: r.summary.n,
                n_test_scenarios: 0,
            })
            .collect()
    }
}

pub const ROBUST_LABEL: &str = "robust_adapted";

/// Compares the agnostic meta threshold, the robust meta threshold (both
/// adapted once per scenario) and the fixed distribution-average threshold,
/// under the empirical weights of `scenarios`, under a point mass on the
/// scenario where `tau_avg` costs the most, and optionally under the final
/// weights of a robust training run.
#[allow(clippy::too_many_arguments)]
pub fn worst_case_report<O: ScenarioObjective + ?Sized>(
    tau_meta: f64,
    tau_robust: f64,
    tau_avg: f64,
    scenarios: &[Scenario],
    empirical_weights: &[f64],
    trained_weights: Option<&[f64]>,
    objective: &O,
    schedule: &SpsaSchedule,
    n_seeds: usize,
    seed: u64,
) -> Result<RobustnessReport, EvalError> {
    if empirical_weights.len() != scenarios.len() {
        return invalid("empirical_weights", "need one weight per scenario");
    }
    if trained_weights.is_some_and(|w| w.len() != scenarios.len()) {
        return invalid("trained_weights", "need one weight per scenario");
    }
    let policies = [
        PolicySpec::adapted(META_LABEL, tau_meta),
        PolicySpec::adapted(ROBUST_LABEL, tau_robust),
        PolicySpec::fixed(AVG_LABEL, tau_avg),
    ];
    let table = cost_table(&policies, scenarios, objective, schedule, n_seeds, seed)?;
    let avg = 2;
    let worst = (0..scenarios.len())
        .map(|i| (i, table.mean_cost(avg, i)))
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, c)| if c > best.1 { (i, c) } else { best },
        )
        .0;
    let mut point = vec![0.0; scenarios.len()];
    point[worst] = 1.0;

    let mut weightings = vec![
        (Weighting::Empirical, empirical_weights.to_vec()),
        (Weighting::WorstCase, point),
    ];
    if let Some(w) = trained_weights {
        weightings.push((Weighting::Trained, w.to_vec()));
    }
    let rows = weightings
        .iter()
        .flat_map(|(weighting, w)| {
            let table = &table;
            (0..policies.len()).map(move |p| RobustnessRow {
                weighting: *weighting,
                policy: table.policies[p].label.clone(),
                summary: table.summarize(p, w),
            })
        })
        .collect();
    Ok(RobustnessReport {
        rows,
        worst_case_index: worst,
        worst_case_scenario: scenarios[worst],
        provenance: Provenance {
            master_seed: seed,
            evaluation_seeds: table.seeds.clone(),
            config_digest: None,
        },
    })
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either input is constant or the
/// lengths differ or are below two.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::{exact_value, CostMatrix, ThresholdPolicy};
    use crate::scenario_dist::EmpiricalScenarioDist;

    /// Returns a fixed cost per scenario (keyed by `p_u_n`) plus `slope * tau`.
    struct Stub {
        slope: f64,
    }

    impl ScenarioObjective for Stub {
        fn value(&self, theta: &Scenario, tau: f64, _seed: u64) -> Result<f64, PomdpError> {
            Ok(100.0 * theta.p_u_n + self.slope * tau)
        }
    }

    fn zero_cost() -> PomdpConfig {
        PomdpConfig {
            cost: CostMatrix::zero(),
            ..PomdpConfig::baseline()
        }
    }

    fn with_pun(p: f64) -> Scenario {
        Scenario::baseline().with(ScenarioField::PUN, p)
    }

    #[test]
    fn grid_includes_both_ends() {
        let g = threshold_grid(0.01);
        assert_eq!(g.len(), 101);
        assert_eq!((g[0], g[100]), (0.0, 1.0));
        let g = threshold_grid(0.03);
        assert_eq!(*g.last().unwrap(), 1.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn zero_costs_pick_smallest_threshold() {
        let r = optimal_threshold(&Scenario::baseline(), &zero_cost(), 0.01, 50, 1).unwrap();
        assert_eq!(r, ThresholdSearch { tau: 0.0, cost: 0.0 });
    }

    #[test]
    fn dominated_reset_is_never_used() {
        let config = PomdpConfig {
            cost: CostMatrix::from_rows([[100.0, 0.0], [100.0, 0.0]]),
            ..PomdpConfig::baseline()
        };
        let theta = Scenario::new(0.5, 0.2, 0.5, 0.2).unwrap();
        let r = optimal_threshold(&theta, &config, 0.01, 100, 3).unwrap();
        assert_eq!(r.tau, 0.0);
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        assert!(optimal_threshold(&Scenario::baseline(), &zero_cost(), 0.0, 10, 1).is_err());
        assert!(optimal_threshold(&Scenario::baseline(), &zero_cost(), 0.2, 10, 1).is_err());
    }

    /// The refinement pass finds a minimizer that sits between grid points.
    #[test]
    fn refinement_resolves_between_grid_points() {
        struct Bowl;
        impl ScenarioObjective for Bowl {
            fn value(&self, _: &Scenario, tau: f64, _: u64) -> Result<f64, PomdpError> {
                Ok((tau - 0.4237).abs())
            }
        }
        let r = optimal_threshold_with(&Bowl, &Scenario::baseline(), 0.01, 0).unwrap();
        assert!((r.tau - 0.424).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn matches_exact_grid_oracle_at_short_horizon() {
        let config = PomdpConfig {
            horizon: 6,
            ..PomdpConfig::baseline()
        };
        let theta = Scenario::baseline();
        let step = 0.05;
        let grid = threshold_grid(step);
        let exact: Vec<f64> = grid
            .iter()
            .map(|&t| exact_value(&theta, &config, ThresholdPolicy::clamped(t), 6).unwrap())
            .collect();
        let oracle = argmin(&grid, &exact);
        let found = optimal_threshold(&theta, &config, step, 20_000, 11).unwrap();
        // the mc minimizer must be near-optimal under the exact values
        let exact_at_found = exact_value(&theta, &config, ThresholdPolicy::clamped(found.tau), 6).unwrap();
        assert!(
            (found.tau - oracle.tau).abs() <= step + 1e-9 || exact_at_found - oracle.cost < 0.05,
            "mc {found:?} vs exact {oracle:?} ({exact_at_found})"
        );
    }

    #[test]
    fn point_mass_baseline_equals_single_scenario_optimum() {
        let theta = with_pun(0.3);
        let objective = MonteCarloObjective::new(PomdpConfig::baseline(), 100).unwrap();
        let dist: ScenarioDistribution = EmpiricalScenarioDist::point_mass(theta).unwrap().into();
        assert_eq!(
            avg_baseline_threshold(&dist, &objective, 0.02, 5).unwrap(),
            optimal_threshold_with(&objective, &theta, 0.02, 5).unwrap()
        );
    }

    #[test]
    fn two_point_baseline_uses_support_mean() {
        let objective = MonteCarloObjective::new(PomdpConfig::baseline(), 100).unwrap();
        let dist: ScenarioDistribution =
            EmpiricalScenarioDist::new(vec![with_pun(0.2), with_pun(0.6)], vec![1.0, 1.0], "")
                .unwrap()
                .into();
        assert!((dist.mean_scenario().p_u_n - 0.4).abs() < 1e-15);
        assert_eq!(
            avg_baseline_threshold(&dist, &objective, 0.02, 5).unwrap(),
            optimal_threshold_with(&objective, &dist.mean_scenario(), 0.02, 5).unwrap()
        );
    }

    #[test]
    fn zero_costs_report_zero() {
        let objective = MonteCarloObjective::new(zero_cost(), 20).unwrap();
        let set = ScenarioSet::new(vec![with_pun(0.1), with_pun(0.5)], "t").unwrap();
        let r = evaluate_policies(0.4, 0.6, &set, &objective, &SpsaSchedule::default(), 3, 2).unwrap();
        for row in &r.rows {
            assert_eq!(
                (row.mean_cost, row.std_dev, row.n_seeds, row.n_test_scenarios),
                (0.0, 0.0, 3, 2)
            );
        }
        // no gradient, so the adapted threshold stays put
        assert!(r
            .details
            .iter()
            .filter(|d| d.label == META_LABEL)
            .all(|d| (d.tau - 0.4).abs() < 1e-15));
        assert_eq!(r.details.len(), 4);
    }

    #[test]
    fn single_cell_report_is_the_stub_value() {
        let set = ScenarioSet::new(vec![with_pun(0.25)], "t").unwrap();
        let schedule = SpsaSchedule::default();
        let r = evaluate_policies(0.5, 0.7, &set, &Stub { slope: 2.0 }, &schedule, 1, 0).unwrap();
        let adapted = 0.5 - schedule.gamma * 2.0;
        let meta = r.row(META_LABEL).unwrap();
        assert!((meta.mean_cost - (25.0 + 2.0 * adapted)).abs() < 1e-12);
        assert_eq!(meta.std_dev, 0.0);
        let avg = r.row(AVG_LABEL).unwrap();
        assert!((avg.mean_cost - (25.0 + 1.4)).abs() < 1e-12);
        assert_eq!(r.provenance.evaluation_seeds.len(), 1);
    }

    #[test]
    fn report_mean_ignores_test_set_order() {
        let objective = MonteCarloObjective::new(PomdpConfig::baseline(), 40).unwrap();
        let schedule = SpsaSchedule::default();
        let a = vec![with_pun(0.1), with_pun(0.3), with_pun(0.5)];
        let mut b = a.clone();
        b.reverse();
        let ra = evaluate_policies(0.6, 0.6, &ScenarioSet::new(a, "").unwrap(), &objective, &schedule, 2, 8).unwrap();
        let rb = evaluate_policies(0.6, 0.6, &ScenarioSet::new(b, "").unwrap(), &objective, &schedule, 2, 8).unwrap();
        // the fixed threshold does not depend on which rollouts a scenario gets
        // only in expectation, so compare against the per-scenario details
        let sum = |r: &EvaluationReport| -> f64 {
            r.details
                .iter()
                .filter(|d| d.label == AVG_LABEL)
                .map(|d| d.cost)
                .sum::<f64>()
                / 3.0
        };
        assert!((sum(&ra) - ra.row(AVG_LABEL).unwrap().mean_cost).abs() < 1e-9);
        assert!((sum(&rb) - rb.row(AVG_LABEL).unwrap().mean_cost).abs() < 1e-9);
        // with a scenario-independent objective the order cannot matter
        let stub = Stub { slope: -3.0 };
        let sa = ScenarioSet::new(vec![with_pun(0.1), with_pun(0.3), with_pun(0.5)], "").unwrap();
        let sb = ScenarioSet::new(vec![with_pun(0.5), with_pun(0.1), with_pun(0.3)], "").unwrap();
        let ra = evaluate_policies(0.6, 0.2, &sa, &stub, &schedule, 2, 8).unwrap();
        let rb = evaluate_policies(0.6, 0.2, &sb, &stub, &schedule, 2, 8).unwrap();
        for label in [META_LABEL, AVG_LABEL] {
            assert!((ra.row(label).unwrap().mean_cost - rb.row(label).unwrap().mean_cost).abs() < 1e-12);
        }
    }

    #[test]
    fn reports_are_reproducible() {
        let objective = MonteCarloObjective::new(PomdpConfig::baseline(), 40).unwrap();
        let set = ScenarioSet::new(vec![with_pun(0.2), with_pun(0.4)], "").unwrap();
        let schedule = SpsaSchedule::default();
        let a = evaluate_policies(0.5, 0.6, &set, &objective, &schedule, 3, 17).unwrap();
        let b = evaluate_policies(0.5, 0.6, &set, &objective, &schedule, 3, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.iter().all(|r| r.std_dev >= 0.0));
    }

    #[test]
    fn sweep_with_constant_gradient_is_flat() {
        let schedule = SpsaSchedule::default();
        let grid: Vec<Scenario> = [0.1, 0.3, 0.5].iter().map(|&p| with_pun(p)).collect();
        let rows =
            sweep_adapted_thresholds(0.5, &grid, ScenarioField::PUN, &Stub { slope: 4.0 }, &schedule, 5, 1).unwrap();
        for (row, p) in rows.iter().zip([0.1, 0.3, 0.5]) {
            assert_eq!(row.param_value, p);
            assert!((row.tau_mean - (0.5 - 0.005 * 4.0)).abs() < 1e-12);
            assert!(row.tau_std < 1e-12);
        }
        let objective = MonteCarloObjective::new(zero_cost(), 10).unwrap();
        let rows = sweep_adapted_thresholds(0.37, &grid, ScenarioField::PUN, &objective, &schedule, 3, 1).unwrap();
        assert!(rows.iter().all(|r| r.tau_mean == 0.37 && r.tau_std == 0.0));
    }

    #[test]
    fn equal_thresholds_give_identical_rows() {
        let objective = MonteCarloObjective::new(PomdpConfig::baseline(), 30).unwrap();
        let points = vec![with_pun(0.1), with_pun(0.5)];
        let r = worst_case_report(
            0.6,
            0.6,
            0.6,
            &points,
            &[0.5, 0.5],
            None,
            &objective,
            &SpsaSchedule::default(),
            2,
            4,
        )
        .unwrap();
        for w in [Weighting::Empirical, Weighting::WorstCase] {
            // the two adapted policies coincide exactly
            assert_eq!(r.get(w, META_LABEL), r.get(w, ROBUST_LABEL));
        }
    }

    #[test]
    fn hand_computed_weightings() {
        struct Table;
        impl ScenarioObjective for Table {
            // flat in tau, so adaptation never moves
            fn value(&self, theta: &Scenario, _tau: f64, _: u64) -> Result<f64, PomdpError> {
                Ok(if theta.p_u_n < 0.3 { 10.0 } else { 40.0 })
            }
        }
        let points = vec![with_pun(0.1), with_pun(0.5)];
        let r = worst_case_report(
            0.2,
            0.8,
            0.5,
            &points,
            &[0.75, 0.25],
            Some(&[0.4, 0.6]),
            &Table,
            &SpsaSchedule::default(),
            3,
            0,
        )
        .unwrap();
        assert_eq!(r.worst_case_index, 1);
        for label in [META_LABEL, ROBUST_LABEL, AVG_LABEL] {
            assert!((r.get(Weighting::Empirical, label).unwrap().mean - 17.5).abs() < 1e-12);
            assert!((r.get(Weighting::WorstCase, label).unwrap().mean - 40.0).abs() < 1e-12);
            assert!((r.get(Weighting::Trained, label).unwrap().mean - 28.0).abs() < 1e-12);
        }
        assert_eq!(r.policy_rows().len(), 9);
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // ties get average ranks: ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4)
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!((r - 4.5 / 4.5f64.sqrt() / 5f64.sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn expected_cost_threshold_on_stub() {
        struct V;
        impl ScenarioObjective for V {
            fn value(&self, theta: &Scenario, tau: f64, _: u64) -> Result<f64, PomdpError> {
                Ok((tau - theta.p_u_n).abs())
            }
        }
        // the mean of |tau - a| over {0.1, 0.2, 0.6} is minimized at the median
        let set = ScenarioSet::new(vec![with_pun(0.1), with_pun(0.2), with_pun(0.6)], "").unwrap();
        let r = expected_cost_threshold(&V, &set, 0.01, 0).unwrap();
        assert!((r.tau - 0.2).abs() < 1e-9, "{r:?}");
    }
}
