//! Zero-trust defense against account take-over attacks.
//!
//! - [`pomdp`]: the two-state POMDP, the trust-score filter, threshold
//!   policies, rollouts and value estimation.
//! - [`spsa`]: two-point simultaneous-perturbation gradient estimates and
//!   step-size schedules.
//! - [`meta`]: first-order meta-learning of a threshold that adapts to a new
//!   scenario with one projected gradient step, and its distributionally
//!   robust descent-ascent variant.
//! - [`scenario_dist`]: scenario distributions (scaled Beta families and
//!   empirical histograms).
//! - [`eval`]: optimal thresholds, baselines and evaluation reports.

pub mod eval;
pub mod meta;
pub mod pomdp;
pub mod scenario_dist;
pub mod seed;
pub mod spsa;

pub use eval::{EvaluationReport, PolicySpec, RobustnessReport, SweepRow, ThresholdSearch, Weighting};
pub use meta::{MetaMode, MetaTrainerState, ScenarioSet, TrainOptions, TrainOutcome};
pub use pomdp::{
    Action, Belief, CostMatrix, Observation, PomdpConfig, PomdpError, Scenario, ScenarioField, State, ThresholdPolicy,
};
pub use scenario_dist::{EmpiricalScenarioDist, ScaledBeta, ScenarioDistribution};
pub use spsa::{SpsaSchedule, StepSchedule};
