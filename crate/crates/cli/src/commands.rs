//! Subcommand implementations.
//!
//! Each `cmd_*` function writes its files and returns an [`Outcome`]; the
//! binary turns that into an exit code. The pieces they are built from
//! (`train_policy`, `baseline_threshold`, ...) are public so that complete
//! pipelines can be driven from tests without going through files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use ztd_core::eval::{
    self, avg_baseline_threshold, cost_table, evaluate_policies, expected_cost_threshold, sweep_adapted_thresholds,
    sweep_optimal_thresholds, worst_case_report, EvalError, EvaluationReport, PolicySpec, ThresholdSearch, AVG_LABEL,
    META_LABEL,
};
use ztd_core::meta::{adapt, train, MetaError, MetaMode, MonteCarloObjective, ScenarioSet, TrainOutcome};
use ztd_core::pomdp::{Scenario, ScenarioField};
use ztd_core::scenario_dist::{DistributionError, ScenarioDistribution};
use ztd_core::seed::derive_seed;

use crate::config::{ConfigError, Family, RunConfig};
use crate::output::{OutputError, OutputSet};

/// Seed-path tags under the master seed.
pub mod tags {
    pub const TRAINING_SET: u64 = 1;
    pub const TRAINING: u64 = 2;
    pub const BASELINE: u64 = 3;
    pub const TEST_SET: u64 = 4;
    pub const EVALUATION: u64 = 5;
    pub const SWEEP: u64 = 6;
    pub const ADAPT: u64 = 7;
    pub const OPTIMAL_SWEEP: u64 = 8;
    pub const ROBUSTNESS: u64 = 9;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Output(#[from] OutputError),

    #[error(transparent)]
    Meta(#[from] MetaError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error(transparent)]
    Distribution(#[from] DistributionError),

    #[error("policy file {path}: {reason}")]
    Policy { path: PathBuf, reason: String },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(ConfigError::Io { .. }) => "io",
            CliError::Config(ConfigError::Parse { .. }) => "parse",
            CliError::Config(ConfigError::Validation { .. }) => "validation",
            CliError::Output(_) => "io",
            CliError::Meta(_) => "training",
            CliError::Eval(_) => "evaluation",
            CliError::Distribution(_) => "distribution",
            CliError::Policy { .. } => "policy",
            CliError::Usage(_) => "usage",
        }
    }

    /// `error=<code> [field=<f>] [line=<n>] message="<json string>"`.
    pub fn one_line(&self) -> String {
        let mut s = format!("error={}", self.code());
        match self {
            CliError::Config(ConfigError::Validation { field, line, .. }) => {
                s.push_str(&format!(" field={field}"));
                if let Some(l) = line {
                    s.push_str(&format!(" line={l}"));
                }
            }
            CliError::Config(ConfigError::Parse { line: Some(l), .. }) => s.push_str(&format!(" line={l}")),
            _ => {}
        }
        let message = self.to_string().replace('\n', " ");
        s.push_str(&format!(
            " message={}",
            serde_json::to_string(&message).expect("string serializes")
        ));
        s
    }
}

/// What a command did.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// False when a training run hit its iteration limit.
    pub converged: bool,
    pub files: Vec<PathBuf>,
    /// Text for standard output.
    pub message: String,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub tau_meta: f64,
    pub mode: MetaMode,
    pub converged: bool,
    pub iterations: u64,
    pub config_digest: String,
    pub master_seed: u64,
    pub training_seed: u64,
    pub training_set: String,
}

pub fn read_policy(path: &Path) -> Result<PolicyFile, CliError> {
    let err = |reason: String| CliError::Policy {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let p: PolicyFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if !(0.0..=1.0).contains(&p.tau_meta) {
        return Err(err(format!("tau_meta = {} is outside [0, 1]", p.tau_meta)));
    }
    Ok(p)
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    iter: u64,
    tau_meta: f64,
    stop_metric: f64,
}

#[derive(Debug, Serialize)]
struct ScenarioRow {
    index: usize,
    p_a_d: f64,
    p_u_d: f64,
    p_a_n: f64,
    p_u_n: f64,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct TableRow<'a> {
    label: &'a str,
    mean_cost: f64,
    std_dev: f64,
    n_seeds: usize,
}

#[derive(Debug, Serialize)]
struct DetailCsvRow<'a> {
    label: &'a str,
    scenario_index: usize,
    p_a_d: f64,
    p_u_d: f64,
    p_a_n: f64,
    p_u_n: f64,
    tau: f64,
    cost: f64,
}

#[derive(Debug, Serialize)]
struct OptimalRow {
    param_value: f64,
    tau_star: f64,
    cost: f64,
}

fn objective(config: &RunConfig, n_rollouts: usize) -> Result<MonteCarloObjective, CliError> {
    Ok(MonteCarloObjective::new(config.pomdp_config(), n_rollouts)?)
}

/// The training scenario set, drawn from the configured distribution.
pub fn training_set(config: &RunConfig) -> Result<ScenarioSet, CliError> {
    let dist = config.distribution()?;
    Ok(dist.sample(
        config.training.n_scenarios,
        derive_seed(config.master_seed, &[tags::TRAINING_SET]),
    )?)
}

fn training_seed(config: &RunConfig, mode: MetaMode) -> u64 {
    let mode_tag = match mode {
        MetaMode::Agnostic => 0,
        MetaMode::Robust => 1,
    };
    derive_seed(config.master_seed, &[tags::TRAINING, mode_tag])
}

/// A finished training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub outcome: TrainOutcome,
    pub set: ScenarioSet,
    pub seed: u64,
}

impl Trained {
    pub fn policy_file(&self, digest: &str, master_seed: u64) -> PolicyFile {
        PolicyFile {
            tau_meta: self.outcome.tau_meta,
            mode: self.outcome.state.mode,
            converged: self.outcome.converged,
            iterations: self.outcome.state.t,
            config_digest: digest.to_string(),
            master_seed,
            training_seed: self.seed,
            training_set: self.set.provenance.clone(),
        }
    }
}

pub fn train_policy(config: &RunConfig, mode: MetaMode) -> Result<Trained, CliError> {
    let set = training_set(config)?;
    let seed = training_seed(config, mode);
    let outcome = train(
        &set,
        &objective(config, config.training.n_rollouts)?,
        config.schedule(),
        config.train_options(mode),
        seed,
    )?;
    Ok(Trained { outcome, set, seed })
}

fn write_training(out: &mut OutputSet, config: &RunConfig, trained: &Trained) -> Result<serde_json::Value, CliError> {
    let prefix = match trained.outcome.state.mode {
        MetaMode::Agnostic => "",
        MetaMode::Robust => "robust-",
    };
    let history: Vec<HistoryRow> = trained
        .outcome
        .state
        .history
        .iter()
        .map(|r| HistoryRow {
            iter: r.iter,
            tau_meta: r.tau_meta,
            stop_metric: r.stop_metric,
        })
        .collect();
    out.csv(&format!("{prefix}history"), &history)?;
    let policy = trained.policy_file(out.digest(), config.master_seed);
    out.json(&format!("{prefix}policy"), &policy)?;
    if trained.outcome.state.mode == MetaMode::Robust {
        let rows: Vec<ScenarioRow> = trained
            .set
            .scenarios()
            .iter()
            .zip(&trained.outcome.state.weights)
            .enumerate()
            .map(|(index, (s, &weight))| scenario_row(index, s, weight))
            .collect();
        out.csv("robust-weights", &rows)?;
    }
    Ok(json!({
        "mode": trained.outcome.state.mode,
        "training_set_seed": derive_seed(config.master_seed, &[tags::TRAINING_SET]),
        "training_seed": trained.seed,
        "tau_meta": trained.outcome.tau_meta,
        "converged": trained.outcome.converged,
        "iterations": trained.outcome.state.t,
    }))
}

fn scenario_row(index: usize, s: &Scenario, weight: f64) -> ScenarioRow {
    ScenarioRow {
        index,
        p_a_d: s.p_a_d,
        p_u_d: s.p_u_d,
        p_a_n: s.p_a_n,
        p_u_n: s.p_u_n,
        weight,
    }
}

/// `train` and `train-robust`: history, policy and (robust) final weights.
pub fn cmd_train(config: &RunConfig, mode: MetaMode) -> Result<Outcome, CliError> {
    let mut out = OutputSet::new(&config.output_dir, &config.digest()?)?;
    let trained = train_policy(config, mode)?;
    let details = write_training(&mut out, config, &trained)?;
    out.manifest(
        match mode {
            MetaMode::Agnostic => "train",
            MetaMode::Robust => "train-robust",
        },
        config,
        details,
    )?;
    Ok(Outcome {
        converged: trained.outcome.converged,
        files: out.written().to_vec(),
        message: format!(
            "tau_meta={} converged={} iterations={}",
            trained.outcome.tau_meta, trained.outcome.converged, trained.outcome.state.t
        ),
    })
}

/// `adapt`: one projected SPSA step from `tau` in `scenario`.
pub fn cmd_adapt(config: &RunConfig, tau: f64, scenario: Scenario) -> Result<Outcome, CliError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CliError::Usage(format!("--tau {tau} is outside [0, 1]")));
    }
    if !scenario.is_threshold_regime() {
        return Err(CliError::Usage(format!(
            "scenario {scenario:?} is outside the threshold regime"
        )));
    }
    let schedule = config.schedule();
    let seed = derive_seed(config.master_seed, &[tags::ADAPT]);
    let a = adapt(
        &objective(config, config.training.n_rollouts)?,
        &scenario,
        tau,
        schedule.eta(1),
        schedule.gamma,
        seed,
    )
    .map_err(MetaError::from)?;
    let mut out = OutputSet::new(&config.output_dir, &config.digest()?)?;
    out.manifest(
        "adapt",
        config,
        json!({ "tau": tau, "scenario": scenario, "seed": seed, "tau_adapted": a.tau_adapted, "gradient": a.gradient }),
    )?;
    Ok(Outcome {
        converged: true,
        files: out.written().to_vec(),
        message: format!("tau_adapted={} gradient={}", a.tau_adapted, a.gradient),
    })
}

/// Optimal threshold at the mean scenario of the configured distribution.
pub fn baseline_threshold(config: &RunConfig, dist: &ScenarioDistribution) -> Result<ThresholdSearch, CliError> {
    Ok(avg_baseline_threshold(
        dist,
        &objective(config, config.evaluation.baseline_rollouts)?,
        config.evaluation.grid_step,
        derive_seed(config.master_seed, &[tags::BASELINE]),
    )?)
}

/// Held-out scenarios, drawn with a seed unrelated to the training set's.
pub fn test_set(config: &RunConfig, dist: &ScenarioDistribution) -> Result<ScenarioSet, CliError> {
    Ok(dist.sample(
        config.evaluation.n_test_scenarios,
        derive_seed(config.master_seed, &[tags::TEST_SET]),
    )?)
}

/// Table-shaped comparison of the adapted meta threshold against the
/// distribution-average threshold (and optionally the expected-cost
/// minimizer over the training set).
pub fn evaluation_report(
    config: &RunConfig,
    dist: &ScenarioDistribution,
    tau_meta: f64,
    tau_avg: f64,
) -> Result<EvaluationReport, CliError> {
    let test = test_set(config, dist)?;
    let obj = objective(config, config.evaluation.n_rollouts)?;
    let schedule = config.schedule();
    let seed = derive_seed(config.master_seed, &[tags::EVALUATION]);
    let mut report = if config.evaluation.expected_cost_baseline {
        let minimizer = expected_cost_threshold(
            &objective(config, config.evaluation.baseline_rollouts)?,
            &training_set(config)?,
            config.evaluation.grid_step,
            derive_seed(config.master_seed, &[tags::BASELINE, 1]),
        )?;
        let policies = [
            PolicySpec::adapted(META_LABEL, tau_meta),
            PolicySpec::fixed(AVG_LABEL, tau_avg),
            PolicySpec::fixed("expected_cost_minimizer", minimizer.tau),
        ];
        let table = cost_table(
            &policies,
            test.scenarios(),
            &obj,
            &schedule,
            config.evaluation.n_seeds,
            seed,
        )?;
        EvaluationReport::from_table(&table, seed)
    } else {
        evaluate_policies(
            tau_meta,
            tau_avg,
            &test,
            &obj,
            &schedule,
            config.evaluation.n_seeds,
            seed,
        )?
    };
    report.provenance.config_digest = Some(config.digest()?);
    Ok(report)
}

fn meta_threshold(
    config: &RunConfig,
    out: &mut OutputSet,
    policy: Option<&Path>,
    mode: MetaMode,
    details: &mut serde_json::Map<String, serde_json::Value>,
) -> Result<(f64, bool), CliError> {
    let key = match mode {
        MetaMode::Agnostic => "policy",
        MetaMode::Robust => "robust_policy",
    };
    match policy {
        Some(path) => {
            let p = read_policy(path)?;
            details.insert(
                key.into(),
                json!({ "file": path.display().to_string(), "tau_meta": p.tau_meta, "config_digest": p.config_digest }),
            );
            Ok((p.tau_meta, true))
        }
        None => {
            let trained = train_policy(config, mode)?;
            let d = write_training(out, config, &trained)?;
            details.insert(key.into(), d);
            Ok((trained.outcome.tau_meta, trained.outcome.converged))
        }
    }
}

/// `eval`: the meta-versus-average table (training first when no policy file
/// is given) and, with `robustness`, the agnostic/robust/average comparison
/// under empirical and worst-case scenario weightings.
pub fn cmd_eval(
    config: &RunConfig,
    policy: Option<&Path>,
    robust_policy: Option<&Path>,
    robustness: bool,
) -> Result<Outcome, CliError> {
    let digest = config.digest()?;
    let mut out = OutputSet::new(&config.output_dir, &digest)?;
    let mut details = serde_json::Map::new();
    let dist = config.distribution()?;
    let (tau_meta, mut converged) = meta_threshold(config, &mut out, policy, MetaMode::Agnostic, &mut details)?;
    let avg = baseline_threshold(config, &dist)?;
    let report = evaluation_report(config, &dist, tau_meta, avg.tau)?;
    let rows: Vec<TableRow> = report
        .rows
        .iter()
        .map(|r| TableRow {
            label: &r.label,
            mean_cost: r.mean_cost,
            std_dev: r.std_dev,
            n_seeds: r.n_seeds,
        })
        .collect();
    out.csv("table", &rows)?;
    let detail_rows: Vec<DetailCsvRow> = report
        .details
        .iter()
        .map(|d| DetailCsvRow {
            label: &d.label,
            scenario_index: d.scenario_index,
            p_a_d: d.scenario.p_a_d,
            p_u_d: d.scenario.p_u_d,
            p_a_n: d.scenario.p_a_n,
            p_u_n: d.scenario.p_u_n,
            tau: d.tau,
            cost: d.cost,
        })
        .collect();
    out.csv("details", &detail_rows)?;
    details.insert("tau_avg".into(), json!(avg.tau));
    details.insert("tau_avg_cost".into(), json!(avg.cost));
    details.insert(
        "baseline_seed".into(),
        json!(derive_seed(config.master_seed, &[tags::BASELINE])),
    );
    details.insert(
        "test_set_seed".into(),
        json!(derive_seed(config.master_seed, &[tags::TEST_SET])),
    );
    details.insert("evaluation_seeds".into(), json!(report.provenance.evaluation_seeds));

    if robustness {
        let (tau_robust, robust_converged) =
            meta_threshold(config, &mut out, robust_policy, MetaMode::Robust, &mut details)?;
        converged &= robust_converged;
        let (points, weights) = match (&dist, config.scenarios.family) {
            (ScenarioDistribution::Empirical(e), Family::Histogram) => {
                (e.support_points().to_vec(), e.weights().to_vec())
            }
            _ => {
                let test = test_set(config, &dist)?;
                let n = test.len();
                (test.scenarios().to_vec(), vec![1.0 / n as f64; n])
            }
        };
        let seed = derive_seed(config.master_seed, &[tags::ROBUSTNESS]);
        let r = worst_case_report(
            tau_meta,
            tau_robust,
            avg.tau,
            &points,
            &weights,
            None,
            &objective(config, config.evaluation.n_rollouts)?,
            &config.schedule(),
            config.evaluation.n_seeds,
            seed,
        )?;
        let rows = r.policy_rows();
        let rows: Vec<TableRow> = rows
            .iter()
            .map(|r| TableRow {
                label: &r.label,
                mean_cost: r.mean_cost,
                std_dev: r.std_dev,
                n_seeds: r.n_seeds,
            })
            .collect();
        out.csv("robustness", &rows)?;
        details.insert("worst_case_scenario".into(), json!(r.worst_case_scenario));
        details.insert("robustness_seed".into(), json!(seed));
    }
    out.manifest("eval", config, serde_json::Value::Object(details))?;
    let mut message = String::new();
    for r in &report.rows {
        message.push_str(&format!("{}: {:.4} ± {:.4}\n", r.label, r.mean_cost, r.std_dev));
    }
    Ok(Outcome {
        converged,
        files: out.written().to_vec(),
        message: message.trim_end().to_string(),
    })
}

/// Grid scenarios spanning the support of the varying field.
pub fn sweep_grid(config: &RunConfig) -> Result<Vec<Scenario>, CliError> {
    let (lo, hi) = config.support()?;
    let n = config.evaluation.sweep_points;
    let field: ScenarioField = config.scenarios.varying.into();
    let base = config.base_scenario();
    Ok((0..n)
        .map(|i| base.with(field, lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect())
}

/// `sweep`: adapted thresholds and single-scenario optimal thresholds across
/// the support of the varying field.
pub fn cmd_sweep(config: &RunConfig, policy: Option<&Path>, tau_meta: Option<f64>) -> Result<Outcome, CliError> {
    let digest = config.digest()?;
    let mut out = OutputSet::new(&config.output_dir, &digest)?;
    let mut details = serde_json::Map::new();
    let (tau, converged) = match tau_meta {
        Some(t) if (0.0..=1.0).contains(&t) => {
            details.insert("tau_meta".into(), json!(t));
            (t, true)
        }
        Some(t) => return Err(CliError::Usage(format!("--tau-meta {t} is outside [0, 1]"))),
        None => meta_threshold(config, &mut out, policy, MetaMode::Agnostic, &mut details)?,
    };
    let grid = sweep_grid(config)?;
    let field: ScenarioField = config.scenarios.varying.into();
    let sweep_seed = derive_seed(config.master_seed, &[tags::SWEEP]);
    let rows = sweep_adapted_thresholds(
        tau,
        &grid,
        field,
        &objective(config, config.training.n_rollouts)?,
        &config.schedule(),
        config.evaluation.sweep_repeats,
        sweep_seed,
    )?;
    out.csv("sweep", &rows)?;
    let optimal_seed = derive_seed(config.master_seed, &[tags::OPTIMAL_SWEEP]);
    let optimal: Vec<OptimalRow> = sweep_optimal_thresholds(
        &grid,
        field,
        &objective(config, config.evaluation.baseline_rollouts)?,
        config.evaluation.grid_step,
        optimal_seed,
    )?
    .into_iter()
    .map(|(param_value, s)| OptimalRow {
        param_value,
        tau_star: s.tau,
        cost: s.cost,
    })
    .collect();
    out.csv("optimal", &optimal)?;
    let taus: Vec<f64> = rows.iter().map(|r| r.tau_mean).collect();
    let params: Vec<f64> = rows.iter().map(|r| r.param_value).collect();
    details.insert("sweep_seed".into(), json!(sweep_seed));
    details.insert("optimal_seed".into(), json!(optimal_seed));
    details.insert("adapted_spearman".into(), json!(eval::spearman(&params, &taus)));
    out.manifest("sweep", config, serde_json::Value::Object(details))?;
    Ok(Outcome {
        converged,
        files: out.written().to_vec(),
        message: format!("tau_meta={tau} points={}", rows.len()),
    })
}

/// `ingest-histogram`: the empirical distribution built from the configured
/// (or given) histogram.
pub fn cmd_ingest(config: &RunConfig) -> Result<Outcome, CliError> {
    if config.scenarios.family != Family::Histogram {
        return Err(CliError::Usage(
            "ingest-histogram needs a histogram (--input or scenarios.histogram)".into(),
        ));
    }
    let dist = match config.distribution()? {
        ScenarioDistribution::Empirical(e) => e,
        ScenarioDistribution::ScaledBeta(_) => unreachable!("histogram family builds an empirical distribution"),
    };
    let field: ScenarioField = config.scenarios.varying.into();
    let mut out = OutputSet::new(&config.output_dir, &config.digest()?)?;
    let rows: Vec<(f64, f64)> = dist
        .support_points()
        .iter()
        .zip(dist.weights())
        .map(|(s, &w)| (s.get(field), w))
        .collect();
    out.csv_with_header("distribution", Some(&["param_value", "weight"]), &rows)?;
    let mean = dist.mean_scenario().get(field);
    out.manifest(
        "ingest-histogram",
        config,
        json!({ "field": field.name(), "support_points": rows.len(), "mean": mean }),
    )?;
    Ok(Outcome {
        converged: true,
        files: out.written().to_vec(),
        message: format!("{} support points, mean {}={mean}", rows.len(), field.name()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Field;

    #[test]
    fn error_lines_are_parseable() {
        let e = CliError::Config(ConfigError::Validation {
            field: "pomdp.rho".into(),
            reason: "1.2 is not in (0, 1)".into(),
            line: Some(4),
        });
        assert_eq!(
            e.one_line(),
            "error=validation field=pomdp.rho line=4 message=\"invalid pomdp.rho: 1.2 is not in (0, 1)\""
        );
        let e = CliError::Usage("two\nlines".into());
        assert!(!e.one_line().contains('\n'));
    }

    #[test]
    fn sweep_grid_spans_the_support() {
        let mut c = RunConfig::default();
        c.evaluation.sweep_points = 8;
        let g = sweep_grid(&c).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0].p_u_n, 0.0);
        assert!((g[7].p_u_n - 0.7).abs() < 1e-12);
        assert!(g.iter().all(|s| s.is_threshold_regime()));
        c.scenarios.varying = Field::PAN;
        let g = sweep_grid(&c).unwrap();
        assert!((g[0].p_a_n - 0.6).abs() < 1e-12);
    }

    #[test]
    fn training_and_test_sets_differ() {
        let c = RunConfig::default();
        let dist = c.distribution().unwrap();
        let train = training_set(&c).unwrap();
        let test = test_set(&c, &dist).unwrap();
        assert_ne!(train.scenarios()[..10], test.scenarios()[..10]);
    }
}
