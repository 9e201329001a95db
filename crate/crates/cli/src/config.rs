//! Run configuration.
//!
//! A run is described by one TOML file. Every key is optional; omitted keys
//! take the defaults below, and unknown keys are rejected. The JSON schema of
//! the format is committed as `config.schema.json` next to this crate's
//! manifest and can be regenerated with `ztd schema`.

use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use ztd_core::meta::{MetaMode, TrainOptions};
use ztd_core::pomdp::{CostMatrix, PomdpConfig, Scenario, ScenarioField};
use ztd_core::scenario_dist::{
    ingest_histogram, read_histogram_csv, EmpiricalScenarioDist, ScaledBeta, ScenarioDistribution,
};
use ztd_core::spsa::{SpsaSchedule, StepSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { message: String, line: Option<usize> },

    #[error("invalid {field}: {reason}")]
    Validation {
        field: String,
        reason: String,
        line: Option<usize>,
    },
}

impl ConfigError {
    fn validation(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.to_string(),
            reason: reason.into(),
            line: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// A Beta distribution rescaled onto `[lo, hi]` for the varying field.
    ScaledBeta,
    /// An empirical distribution built from a `group_id,technique_count` CSV.
    Histogram,
    /// Every scenario equals `base`.
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum Field {
    #[serde(rename = "p_a_d")]
    PAD,
    #[serde(rename = "p_u_d")]
    PUD,
    #[serde(rename = "p_a_n")]
    PAN,
    #[serde(rename = "p_u_n")]
    PUN,
}

impl From<Field> for ScenarioField {
    fn from(f: Field) -> Self {
        match f {
            Field::PAD => ScenarioField::PAD,
            Field::PUD => ScenarioField::PUD,
            Field::PAN => ScenarioField::PAN,
            Field::PUN => ScenarioField::PUN,
        }
    }
}

impl From<ScenarioField> for Field {
    fn from(f: ScenarioField) -> Self {
        match f {
            ScenarioField::PAD => Field::PAD,
            ScenarioField::PUD => Field::PUD,
            ScenarioField::PAN => Field::PAN,
            ScenarioField::PUN => Field::PUN,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PomdpSection {
    /// Probability of an alert when the account is adversarial.
    pub q_a: f64,
    /// Probability of an alert when the account is legitimate.
    pub q_u: f64,
    /// Discount factor, in (0, 1).
    pub rho: f64,
    /// Rollout length.
    pub horizon: usize,
    /// Initial trust score.
    pub b0_legit: f64,
    /// Cost rows `[[adversarial_reset, adversarial_continue], [legitimate_reset, legitimate_continue]]`.
    pub cost: [[f64; 2]; 2],
}

impl Default for PomdpSection {
    fn default() -> Self {
        let p = PomdpConfig::baseline();
        PomdpSection {
            q_a: p.q_a,
            q_u: p.q_u,
            rho: p.rho,
            horizon: p.horizon,
            b0_legit: p.b0_legit,
            cost: p.cost.rows(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct BaseScenario {
    pub p_a_d: f64,
    pub p_u_d: f64,
    pub p_a_n: f64,
    pub p_u_n: f64,
}

impl Default for BaseScenario {
    fn default() -> Self {
        let s = Scenario::baseline();
        BaseScenario {
            p_a_d: s.p_a_d,
            p_u_d: s.p_u_d,
            p_a_n: s.p_a_n,
            p_u_n: s.p_u_n,
        }
    }
}

impl From<BaseScenario> for Scenario {
    fn from(b: BaseScenario) -> Self {
        Scenario {
            p_a_d: b.p_a_d,
            p_u_d: b.p_u_d,
            p_a_n: b.p_a_n,
            p_u_n: b.p_u_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub family: Family,
    /// The scenario field that varies; the others come from `base`.
    pub varying: Field,
    /// Support start; defaults to the lowest value that keeps `base` in the
    /// threshold regime.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<f64>,
    /// Support end; defaults to the highest such value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    /// Distribution mean (`scaled_beta` only); defaults to the support midpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    /// `alpha + beta` (`scaled_beta` only).
    pub concentration: f64,
    /// Histogram CSV (`histogram` only), relative to the configuration file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<PathBuf>,
    pub base: BaseScenario,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            family: Family::ScaledBeta,
            varying: Field::PUN,
            lo: None,
            hi: None,
            mean: None,
            concentration: 10.0,
            histogram: None,
            base: BaseScenario::default(),
        }
    }
}

/// A step-size sequence: `{ kind = "constant", value = .. }` or
/// `{ kind = "power_decay", scale = .., offset = .., exponent = .. }` meaning
/// `scale / (t + offset)^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSpec {
    Constant { value: f64 },
    PowerDecay { scale: f64, offset: f64, exponent: f64 },
}

impl From<StepSpec> for StepSchedule {
    fn from(s: StepSpec) -> Self {
        match s {
            StepSpec::Constant { value } => StepSchedule::Constant { value },
            StepSpec::PowerDecay {
                scale,
                offset,
                exponent,
            } => StepSchedule::PowerDecay {
                scale,
                offset,
                exponent,
            },
        }
    }
}

impl From<StepSchedule> for StepSpec {
    fn from(s: StepSchedule) -> Self {
        match s {
            StepSchedule::Constant { value } => StepSpec::Constant { value },
            StepSchedule::PowerDecay {
                scale,
                offset,
                exponent,
            } => StepSpec::PowerDecay {
                scale,
                offset,
                exponent,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// SPSA perturbation size.
    pub eta: StepSpec,
    /// Meta descent step.
    pub alpha: StepSpec,
    /// Scenario-weight ascent step (robust training).
    pub beta: StepSpec,
    /// Adaptation step.
    pub gamma: f64,
    /// Stopping tolerance on batch gradient magnitudes.
    pub epsilon: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = SpsaSchedule::default();
        ScheduleSection {
            eta: s.eta.into(),
            alpha: s.alpha.into(),
            beta: s.beta.into(),
            gamma: s.gamma,
            epsilon: s.epsilon,
        }
    }
}

impl From<ScheduleSection> for SpsaSchedule {
    fn from(s: ScheduleSection) -> Self {
        SpsaSchedule {
            eta: s.eta.into(),
            alpha: s.alpha.into(),
            beta: s.beta.into(),
            gamma: s.gamma,
            epsilon: s.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Size of the sampled training scenario set.
    pub n_scenarios: usize,
    pub batch_size: usize,
    pub max_iters: u64,
    /// Consecutive iterations the stopping rule must hold.
    pub stop_window: usize,
    /// Initial meta threshold.
    pub tau_init: f64,
    /// Rollouts per value estimate.
    pub n_rollouts: usize,
    pub schedule: ScheduleSection,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let o = TrainOptions::default();
        TrainingSection {
            n_scenarios: 1000,
            batch_size: o.batch_size,
            max_iters: o.max_iters,
            stop_window: o.stop_window,
            tau_init: o.tau_init,
            n_rollouts: 100,
            schedule: ScheduleSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Repetitions with different seeds.
    pub n_seeds: usize,
    /// Size of the held-out test scenario set.
    pub n_test_scenarios: usize,
    /// Threshold grid resolution, in (0, 0.1].
    pub grid_step: f64,
    /// Rollouts per value estimate while evaluating policies.
    pub n_rollouts: usize,
    /// Rollouts per value estimate while searching for optimal thresholds.
    pub baseline_rollouts: usize,
    /// Also report the single threshold minimizing the average cost over the
    /// training scenarios.
    pub expected_cost_baseline: bool,
    /// Grid points in sweep tables.
    pub sweep_points: usize,
    /// Adaptations per sweep grid point.
    pub sweep_repeats: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            n_seeds: 50,
            n_test_scenarios: 100,
            grid_step: 0.01,
            n_rollouts: 100,
            baseline_rollouts: 500,
            expected_cost_baseline: false,
            sweep_points: 13,
            sweep_repeats: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    /// Where output files are written.
    pub output_dir: PathBuf,
    pub pomdp: PomdpSection,
    pub scenarios: ScenarioSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    #[schemars(skip)]
    pub source_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            output_dir: PathBuf::from("out"),
            pomdp: PomdpSection::default(),
            scenarios: ScenarioSection::default(),
            training: TrainingSection::default(),
            evaluation: EvaluationSection::default(),
            source_dir: None,
        }
    }
}

/// Line (1-based) of `byte` in `text`.
fn line_at(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// Line on which the dotted key `field` is assigned. A key that is absent
/// (a missing required value, say) falls back to the header of its table.
pub fn line_of(text: &str, field: &str) -> Option<usize> {
    let mut table = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(header) = line.strip_prefix('[') {
            table = header.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if header_line.is_none()
                && field.starts_with(&format!("{table}."))
                && !field[table.len() + 1..].contains('.')
            {
                header_line = Some(i + 1);
            }
            continue;
        }
        let Some((key, _)) = line.split_once('=') else { continue };
        let key = key.trim().trim_matches('"');
        let full = if table.is_empty() {
            key.to_string()
        } else {
            format!("{table}.{key}")
        };
        if full == field || field.starts_with(&format!("{full}.")) {
            return Some(i + 1);
        }
    }
    header_line
}

impl RunConfig {
    /// Parses and validates TOML text. Relative paths resolve against
    /// `source_dir`.
    pub fn from_toml_str(text: &str, source_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            message: e.message().to_string(),
            line: e.span().map(|s| line_at(text, s.start)),
        })?;
        config.source_dir = source_dir.map(Path::to_path_buf);
        config.validate().map_err(|e| match e {
            ConfigError::Validation { field, reason, .. } => ConfigError::Validation {
                line: line_of(text, &field),
                field,
                reason,
            },
            other => other,
        })?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn pomdp_config(&self) -> PomdpConfig {
        let p = &self.pomdp;
        PomdpConfig {
            q_a: p.q_a,
            q_u: p.q_u,
            cost: CostMatrix::from_rows(p.cost),
            rho: p.rho,
            horizon: p.horizon,
            b0_legit: p.b0_legit,
        }
    }

    pub fn schedule(&self) -> SpsaSchedule {
        self.training.schedule.into()
    }

    pub fn train_options(&self, mode: MetaMode) -> TrainOptions {
        TrainOptions {
            mode,
            batch_size: self.training.batch_size,
            max_iters: self.training.max_iters,
            stop_window: self.training.stop_window,
            tau_init: self.training.tau_init,
        }
    }

    pub fn base_scenario(&self) -> Scenario {
        self.scenarios.base.into()
    }

    /// Support of the varying field.
    pub fn support(&self) -> Result<(f64, f64), ConfigError> {
        let field: ScenarioField = self.scenarios.varying.into();
        let range = self.base_scenario().regime_range(field);
        let lo = match (self.scenarios.lo, range) {
            (Some(lo), _) => lo,
            (None, Some((lo, _))) => lo,
            (None, None) => {
                return Err(ConfigError::validation(
                    "scenarios.lo",
                    "base scenario leaves no valid range",
                ))
            }
        };
        let hi = match (self.scenarios.hi, range) {
            (Some(hi), _) => hi,
            (None, Some((_, hi))) => hi,
            (None, None) => {
                return Err(ConfigError::validation(
                    "scenarios.hi",
                    "base scenario leaves no valid range",
                ))
            }
        };
        Ok((lo, hi))
    }

    pub fn histogram_path(&self) -> Option<PathBuf> {
        let p = self.scenarios.histogram.as_ref()?;
        Some(match &self.source_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.clone(),
        })
    }

    pub fn histogram_bytes(&self) -> Result<Option<Vec<u8>>, ConfigError> {
        match (self.scenarios.family, self.histogram_path()) {
            (Family::Histogram, Some(path)) => fs::read(&path)
                .map(Some)
                .map_err(|source| ConfigError::Io { path, source }),
            _ => Ok(None),
        }
    }

    /// The scenario distribution described by the `scenarios` section.
    pub fn distribution(&self) -> Result<ScenarioDistribution, ConfigError> {
        let s = &self.scenarios;
        let base = self.base_scenario();
        let field: ScenarioField = s.varying.into();
        match s.family {
            Family::Point => EmpiricalScenarioDist::point_mass(base)
                .map(Into::into)
                .map_err(|e| ConfigError::validation("scenarios.base", e.to_string())),
            Family::ScaledBeta => {
                let (lo, hi) = self.support()?;
                let mean = s.mean.unwrap_or((lo + hi) / 2.0);
                ScaledBeta::from_mean(lo, hi, mean, s.concentration, field, base)
                    .map(Into::into)
                    .map_err(|e| {
                        use ztd_core::scenario_dist::DistributionError as D;
                        let key = match &e {
                            D::MeanOutOfSupport { .. } => "scenarios.mean",
                            D::InvalidParameter {
                                field: "concentration", ..
                            } => "scenarios.concentration",
                            D::SupportOutsideRegime { hi, allowed_hi, .. } if hi > allowed_hi => "scenarios.hi",
                            _ => "scenarios.lo",
                        };
                        ConfigError::validation(key, e.to_string())
                    })
            }
            Family::Histogram => {
                let (lo, hi) = self.support()?;
                let path = self.histogram_path().ok_or_else(|| {
                    ConfigError::validation("scenarios.histogram", "required for the histogram family")
                })?;
                let file = fs::File::open(&path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                let rows = read_histogram_csv(file)
                    .map_err(|e| ConfigError::validation("scenarios.histogram", e.to_string()))?;
                let name = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                ingest_histogram(&rows, field, lo, hi, base, name)
                    .map(Into::into)
                    .map_err(|e| ConfigError::validation("scenarios.histogram", e.to_string()))
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::validation(field, format!("{v} is not in [0, 1]")))
            }
        };
        let at_least_one = |field: &str, v: u64| {
            if v >= 1 {
                Ok(())
            } else {
                Err(ConfigError::validation(field, "must be at least 1"))
            }
        };

        let p = &self.pomdp;
        unit("pomdp.q_a", p.q_a)?;
        unit("pomdp.q_u", p.q_u)?;
        unit("pomdp.b0_legit", p.b0_legit)?;
        if !(p.rho > 0.0 && p.rho < 1.0) {
            return Err(ConfigError::validation(
                "pomdp.rho",
                format!("{} is not in (0, 1)", p.rho),
            ));
        }
        at_least_one("pomdp.horizon", p.horizon as u64)?;
        if p.cost.iter().flatten().any(|c| !c.is_finite()) {
            return Err(ConfigError::validation("pomdp.cost", "entries must be finite"));
        }

        let b = &self.scenarios.base;
        unit("scenarios.base.p_a_d", b.p_a_d)?;
        unit("scenarios.base.p_u_d", b.p_u_d)?;
        unit("scenarios.base.p_a_n", b.p_a_n)?;
        unit("scenarios.base.p_u_n", b.p_u_n)?;
        if self.scenarios.family == Family::Histogram {
            match self.histogram_path() {
                None => {
                    return Err(ConfigError::validation(
                        "scenarios.histogram",
                        "required for the histogram family",
                    ))
                }
                Some(path) if !path.is_file() => {
                    return Err(ConfigError::validation(
                        "scenarios.histogram",
                        format!("{} does not exist", path.display()),
                    ))
                }
                Some(_) => {}
            }
        }
        if self.scenarios.family == Family::Point && !self.base_scenario().is_threshold_regime() {
            return Err(ConfigError::validation(
                "scenarios.base",
                "outside the threshold regime",
            ));
        }
        if self.scenarios.family != Family::Point {
            let (lo, hi) = self.support()?;
            if !(lo < hi) {
                return Err(ConfigError::validation(
                    "scenarios.lo",
                    format!("{lo} is not below scenarios.hi = {hi}"),
                ));
            }
        }
        self.distribution()?;

        let t = &self.training;
        at_least_one("training.n_scenarios", t.n_scenarios as u64)?;
        if t.batch_size == 0 || t.batch_size > t.n_scenarios {
            return Err(ConfigError::validation(
                "training.batch_size",
                format!(
                    "{} is not between 1 and training.n_scenarios = {}",
                    t.batch_size, t.n_scenarios
                ),
            ));
        }
        at_least_one("training.max_iters", t.max_iters)?;
        at_least_one("training.stop_window", t.stop_window as u64)?;
        at_least_one("training.n_rollouts", t.n_rollouts as u64)?;
        unit("training.tau_init", t.tau_init)?;
        self.schedule().validate().map_err(|e| {
            let ztd_core::spsa::ScheduleError::Invalid { field, reason } = e;
            ConfigError::validation(&format!("training.schedule.{field}"), reason)
        })?;

        let e = &self.evaluation;
        at_least_one("evaluation.n_seeds", e.n_seeds as u64)?;
        at_least_one("evaluation.n_test_scenarios", e.n_test_scenarios as u64)?;
        at_least_one("evaluation.n_rollouts", e.n_rollouts as u64)?;
        at_least_one("evaluation.baseline_rollouts", e.baseline_rollouts as u64)?;
        at_least_one("evaluation.sweep_repeats", e.sweep_repeats as u64)?;
        if e.sweep_points < 2 {
            return Err(ConfigError::validation("evaluation.sweep_points", "must be at least 2"));
        }
        if !(e.grid_step > 0.0 && e.grid_step <= 0.1) {
            return Err(ConfigError::validation(
                "evaluation.grid_step",
                format!("{} is not in (0, 0.1]", e.grid_step),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of everything that affects
    /// results, plus the histogram contents when one is used. Locations (the
    /// output directory, the histogram's path) do not count.
    pub fn digest(&self) -> Result<String, ConfigError> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.scenarios.histogram = None;
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&canonical).expect("configuration serializes"));
        if let Some(bytes) = self.histogram_bytes()? {
            hasher.update(b"\0histogram\0");
            hasher.update(bytes);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

/// Reads and validates a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml_str(&text, path.parent())
}

/// JSON schema of the configuration file.
pub fn schema_json() -> String {
    let schema = schemars::schema_for!(RunConfig);
    let mut s = serde_json::to_string_pretty(&schema).expect("schema serializes");
    s.push('\n');
    s
}
