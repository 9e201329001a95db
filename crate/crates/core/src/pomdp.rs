//! Two-state account take-over POMDP.
//!
//! States: `0` adversarial, `1` legitimate. Actions: `0` reset the account,
//! `1` no action. Observations: `0` security alert, `1` no alert.
//!
//! The defender tracks the trust score `TS = b(s = 1)` with a Bayes filter
//! and acts through a threshold policy `a = 1{tau < TS <= 1}`. The expected
//! discounted cost of a threshold is estimated by Monte Carlo rollouts, and
//! for short horizons it can be computed exactly by path enumeration.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Row-major 2x2 matrix.
pub type Matrix2 = [[f64; 2]; 2];

/// Slack used when comparing probabilities against validity bounds.
pub const VALIDITY_TOLERANCE: f64 = 1e-12;

/// Default enumeration budget for [`exact_value`], in leaf paths.
pub const DEFAULT_PATH_BUDGET: u64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PomdpError {
    #[error("{field} = {value} is outside [0, 1]")]
    ProbabilityOutOfRange { field: &'static str, value: f64 },

    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("observation {observation:?} has zero likelihood under the predicted belief")]
    ZeroLikelihood { observation: Observation },

    #[error("horizon {horizon} needs {paths} enumerated paths, budget is {budget}")]
    HorizonTooLarge { horizon: usize, paths: u128, budget: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum State {
    Adversarial = 0,
    Legitimate = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Remove stored credentials and reset the account.
    Reset = 0,
    /// Normal operation.
    Continue = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    Alert = 0,
    Quiet = 1,
}

macro_rules! binary_index {
    ($ty:ident, $zero:ident, $one:ident) => {
        impl $ty {
            pub const ALL: [$ty; 2] = [$ty::$zero, $ty::$one];

            #[inline]
            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                match i {
                    0 => Some($ty::$zero),
                    1 => Some($ty::$one),
                    _ => None,
                }
            }
        }
    };
}

binary_index!(State, Adversarial, Legitimate);
binary_index!(Action, Reset, Continue);
binary_index!(Observation, Alert, Quiet);

/// Which transition probability a scenario family varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioField {
    PAD,
    PUD,
    PAN,
    PUN,
}

impl ScenarioField {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioField::PAD => "p_a_d",
            ScenarioField::PUD => "p_u_d",
            ScenarioField::PAN => "p_a_n",
            ScenarioField::PUN => "p_u_n",
        }
    }
}

impl std::str::FromStr for ScenarioField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p_a_d" => Ok(ScenarioField::PAD),
            "p_u_d" => Ok(ScenarioField::PUD),
            "p_a_n" => Ok(ScenarioField::PAN),
            "p_u_n" => Ok(ScenarioField::PUN),
            other => Err(format!("unknown scenario field `{other}`")),
        }
    }
}

/// An attack scenario: the four transition probabilities of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Attacker keeps control of the account through a reset.
    pub p_a_d: f64,
    /// Legitimate account is compromised while being reset.
    pub p_u_d: f64,
    /// Attacker stays in the account during normal operation (stealthiness).
    pub p_a_n: f64,
    /// Legitimate account is taken over during normal operation (vulnerability).
    pub p_u_n: f64,
}

impl Scenario {
    pub fn new(p_a_d: f64, p_u_d: f64, p_a_n: f64, p_u_n: f64) -> Result<Self, PomdpError> {
        let s = Scenario {
            p_a_d,
            p_u_d,
            p_a_n,
            p_u_n,
        };
        s.validate()?;
        Ok(s)
    }

    /// `p_a_d = 0.2, p_u_d = 0.1, p_a_n = 0.8, p_u_n = 0.5`.
    pub fn baseline() -> Self {
        Scenario {
            p_a_d: 0.2,
            p_u_d: 0.1,
            p_a_n: 0.8,
            p_u_n: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), PomdpError> {
        for field in [
            ScenarioField::PAD,
            ScenarioField::PUD,
            ScenarioField::PAN,
            ScenarioField::PUN,
        ] {
            check_probability(field.name(), self.get(field))?;
        }
        Ok(())
    }

    pub fn get(&self, field: ScenarioField) -> f64 {
        match field {
            ScenarioField::PAD => self.p_a_d,
            ScenarioField::PUD => self.p_u_d,
            ScenarioField::PAN => self.p_a_n,
            ScenarioField::PUN => self.p_u_n,
        }
    }

    pub fn with(mut self, field: ScenarioField, value: f64) -> Self {
        match field {
            ScenarioField::PAD => self.p_a_d = value,
            ScenarioField::PUD => self.p_u_d = value,
            ScenarioField::PAN => self.p_a_n = value,
            ScenarioField::PUN => self.p_u_n = value,
        }
        self
    }

    /// True when the scenario lies in the regime where threshold policies are
    /// optimal: `p_u_n <= min(p_a_n, p_a_n - p_a_d + p_u_d)`.
    pub fn is_threshold_regime(&self) -> bool {
        self.validate().is_ok()
            && self.p_u_n <= self.p_a_n.min(self.p_a_n - self.p_a_d + self.p_u_d) + VALIDITY_TOLERANCE
    }

    /// Interval of values `field` may take, with the other three fields held
    /// fixed, for the scenario to stay in the threshold regime. `None` if empty.
    pub fn regime_range(&self, field: ScenarioField) -> Option<(f64, f64)> {
        let (lo, hi) = match field {
            ScenarioField::PUN => (0.0, self.p_a_n.min(self.p_a_n - self.p_a_d + self.p_u_d)),
            ScenarioField::PAN => (self.p_u_n.max(self.p_u_n - self.p_u_d + self.p_a_d), 1.0),
            // p_u_n <= p_a_n - p_a_d + p_u_d  <=>  p_a_d <= p_a_n + p_u_d - p_u_n
            ScenarioField::PAD => {
                if self.p_u_n > self.p_a_n + VALIDITY_TOLERANCE {
                    return None;
                }
                (0.0, self.p_a_n + self.p_u_d - self.p_u_n)
            }
            ScenarioField::PUD => {
                if self.p_u_n > self.p_a_n + VALIDITY_TOLERANCE {
                    return None;
                }
                (self.p_u_n - self.p_a_n + self.p_a_d, 1.0)
            }
        };
        let (lo, hi) = (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0));
        (lo <= hi + VALIDITY_TOLERANCE).then_some((lo, hi.max(lo)))
    }
}

/// Defender cost `C(s, a)`, indexed `[state][action]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostMatrix {
    /// Adversarial account, reset.
    pub adversarial_reset: f64,
    /// Adversarial account, no action: the damage of an undefended attack.
    pub adversarial_continue: f64,
    /// Legitimate account, reset: inconvenience to the user.
    pub legitimate_reset: f64,
    pub legitimate_continue: f64,
}

impl CostMatrix {
    pub fn from_rows(rows: Matrix2) -> Self {
        CostMatrix {
            adversarial_reset: rows[0][0],
            adversarial_continue: rows[0][1],
            legitimate_reset: rows[1][0],
            legitimate_continue: rows[1][1],
        }
    }

    pub fn baseline() -> Self {
        Self::from_rows([[10.0, 15.0], [3.0, 0.0]])
    }

    pub fn zero() -> Self {
        Self::from_rows([[0.0; 2]; 2])
    }

    pub fn constant(c: f64) -> Self {
        Self::from_rows([[c; 2]; 2])
    }

    pub fn rows(&self) -> Matrix2 {
        [
            [self.adversarial_reset, self.adversarial_continue],
            [self.legitimate_reset, self.legitimate_continue],
        ]
    }

    #[inline]
    pub fn get(&self, s: State, a: Action) -> f64 {
        self.rows()[s.index()][a.index()]
    }

    pub fn min(&self) -> f64 {
        self.rows().iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.rows().iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Everything about the model that does not change across scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PomdpConfig {
    /// Detection rate: probability of an alert when the account is adversarial.
    pub q_a: f64,
    /// False alarm rate: probability of an alert when the account is legitimate.
    pub q_u: f64,
    pub cost: CostMatrix,
    /// Discount factor in (0, 1).
    pub rho: f64,
    /// Rollout length.
    pub horizon: usize,
    /// Initial trust score `b0(s = 1)`.
    pub b0_legit: f64,
}

impl Default for PomdpConfig {
    fn default() -> Self {
        Self::baseline()
    }
}

impl PomdpConfig {
    pub fn baseline() -> Self {
        PomdpConfig {
            q_a: 0.9,
            q_u: 0.1,
            cost: CostMatrix::baseline(),
            rho: 0.86,
            horizon: 100,
            b0_legit: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), PomdpError> {
        check_probability("q_a", self.q_a)?;
        check_probability("q_u", self.q_u)?;
        check_probability("b0_legit", self.b0_legit)?;
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(PomdpError::InvalidConfig {
                field: "rho",
                reason: format!("{} is not in (0, 1)", self.rho),
            });
        }
        if self.horizon == 0 {
            return Err(PomdpError::InvalidConfig {
                field: "horizon",
                reason: "must be at least 1".into(),
            });
        }
        if self.cost.rows().iter().flatten().any(|c| !c.is_finite()) {
            return Err(PomdpError::InvalidConfig {
                field: "cost",
                reason: "entries must be finite".into(),
            });
        }
        Ok(())
    }

    /// Bounds `[min C, max C] / (1 - rho)` on any discounted cost.
    pub fn cost_bounds(&self) -> (f64, f64) {
        let scale = 1.0 / (1.0 - self.rho);
        (self.cost.min().min(0.0) * scale, self.cost.max().max(0.0) * scale)
    }
}

fn check_probability(field: &'static str, value: f64) -> Result<(), PomdpError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(PomdpError::ProbabilityOutOfRange { field, value })
    }
}

/// State transition matrix `T(a)`; entry `[i][j]` is `P(s' = j | s = i, a)`.
pub fn transition_matrix(theta: &Scenario, a: Action) -> Matrix2 {
    match a {
        Action::Reset => [[theta.p_a_d, 1.0 - theta.p_a_d], [theta.p_u_d, 1.0 - theta.p_u_d]],
        Action::Continue => [[theta.p_a_n, 1.0 - theta.p_a_n], [theta.p_u_n, 1.0 - theta.p_u_n]],
    }
}

/// Observation matrix; entry `[s][o]` is `P(o | s)`. Does not depend on the action.
pub fn observation_matrix(config: &PomdpConfig) -> Matrix2 {
    [[config.q_a, 1.0 - config.q_a], [config.q_u, 1.0 - config.q_u]]
}

/// Defender belief, stored as the trust score `b(s = 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    ts: f64,
}

impl Belief {
    pub fn new(trust_score: f64) -> Result<Self, PomdpError> {
        check_probability("trust_score", trust_score)?;
        Ok(Belief { ts: trust_score })
    }

    #[inline]
    pub fn trust_score(&self) -> f64 {
        self.ts
    }

    /// `(b(s = 0), b(s = 1))`.
    pub fn as_array(&self) -> [f64; 2] {
        [1.0 - self.ts, self.ts]
    }
}

/// One Bayes filter step: predict through `T(a)`, then condition on `o`.
pub fn belief_update(
    b: Belief,
    a: Action,
    o: Observation,
    theta: &Scenario,
    config: &PomdpConfig,
) -> Result<Belief, PomdpError> {
    let trans = transition_matrix(theta, a);
    let obs = observation_matrix(config);
    filter_step(b.ts, &trans, &obs, o.index()).map(|ts| Belief { ts })
}

#[inline]
fn filter_step(ts: f64, trans: &Matrix2, obs: &Matrix2, o: usize) -> Result<f64, PomdpError> {
    let prior = [1.0 - ts, ts];
    let pred_adv = prior[0] * trans[0][0] + prior[1] * trans[1][0];
    let pred_legit = prior[0] * trans[0][1] + prior[1] * trans[1][1];
    let joint_adv = obs[0][o] * pred_adv;
    let joint_legit = obs[1][o] * pred_legit;
    let evidence = joint_adv + joint_legit;
    if evidence <= 0.0 {
        return Err(PomdpError::ZeroLikelihood {
            observation: Observation::ALL[o],
        });
    }
    Ok((joint_legit / evidence).clamp(0.0, 1.0))
}

/// Threshold policy: reset iff the trust score is at or below `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    tau: f64,
}

impl ThresholdPolicy {
    pub fn new(tau: f64) -> Result<Self, PomdpError> {
        check_probability("tau", tau)?;
        Ok(ThresholdPolicy { tau })
    }

    /// Clamps `tau` into `[0, 1]`; NaN maps to 0.
    pub fn clamped(tau: f64) -> Self {
        ThresholdPolicy {
            tau: if tau.is_nan() { 0.0 } else { tau.clamp(0.0, 1.0) },
        }
    }

    #[inline]
    pub fn tau(&self) -> f64 {
        self.tau
    }

    #[inline]
    pub fn act(&self, trust_score: f64) -> Action {
        if self.tau < trust_score {
            Action::Continue
        } else {
            Action::Reset
        }
    }
}

/// One step of a recorded trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Step {
    pub state: State,
    pub action: Action,
    /// Observation received after the transition.
    pub observation: Observation,
    /// Trust score the action was chosen from.
    pub trust_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub discounted_cost: f64,
    pub trajectory: Option<Vec<Step>>,
}

/// Scenario and configuration compiled into the matrices a rollout needs.
#[derive(Debug, Clone, Copy)]
pub struct Model {
    trans: [Matrix2; 2],
    obs: Matrix2,
    cost: Matrix2,
    rho: f64,
    horizon: usize,
    b0_legit: f64,
    // P(next = adversarial | state, action) and P(alert | next) as 32-bit
    // fixed-point cutoffs, so one u64 draw drives both samples of a step.
    adv_cut: [[u64; 2]; 2],
    alert_cut: [u64; 2],
}

#[inline]
fn cutoff(p: f64) -> u64 {
    (p * 4_294_967_296.0).round() as u64
}

impl Model {
    pub fn new(theta: &Scenario, config: &PomdpConfig) -> Self {
        let trans = [
            transition_matrix(theta, Action::Reset),
            transition_matrix(theta, Action::Continue),
        ];
        let obs = observation_matrix(config);
        let mut adv_cut = [[0; 2]; 2];
        for (s, row) in adv_cut.iter_mut().enumerate() {
            for (a, cut) in row.iter_mut().enumerate() {
                *cut = cutoff(trans[a][s][0]);
            }
        }
        Model {
            trans,
            obs,
            cost: config.cost.rows(),
            rho: config.rho,
            horizon: config.horizon,
            b0_legit: config.b0_legit,
            adv_cut,
            alert_cut: [cutoff(obs[0][0]), cutoff(obs[1][0])],
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    fn run<R: Rng + ?Sized>(
        &self,
        policy: ThresholdPolicy,
        rng: &mut R,
        mut trace: Option<&mut Vec<Step>>,
    ) -> Result<f64, PomdpError> {
        const LOW: u64 = 0xFFFF_FFFF;
        let tau = policy.tau();
        // indices: state 0 adversarial / 1 legitimate, action 0 reset / 1 continue,
        // observation 0 alert / 1 quiet
        let mut state = (rng.random::<f64>() < self.b0_legit) as usize;
        let mut ts = self.b0_legit;
        let mut discount = 1.0;
        let mut total = 0.0;
        for _ in 0..self.horizon {
            let action = (tau < ts) as usize;
            total += discount * self.cost[state][action];
            discount *= self.rho;

            let draw = rng.next_u64();
            let next = ((draw >> 32) >= self.adv_cut[state][action]) as usize;
            let observation = ((draw & LOW) >= self.alert_cut[next]) as usize;
            if let Some(steps) = trace.as_deref_mut() {
                steps.push(Step {
                    state: State::ALL[state],
                    action: Action::ALL[action],
                    observation: Observation::ALL[observation],
                    trust_score: ts,
                });
            }
            ts = filter_step(ts, &self.trans[action], &self.obs, observation)?;
            state = next;
        }
        Ok(total)
    }

    pub fn rollout<R: Rng + ?Sized>(&self, policy: ThresholdPolicy, rng: &mut R) -> Result<f64, PomdpError> {
        self.run(policy, rng, None)
    }

    /// Monte Carlo estimate from `n_rollouts` rollouts; rollout `i` draws from
    /// the substream `[i]` of `seed`, so two policies evaluated with the same
    /// seed share their random numbers.
    pub fn value_estimate(
        &self,
        policy: ThresholdPolicy,
        n_rollouts: usize,
        seed: u64,
    ) -> Result<ValueEstimate, PomdpError> {
        let mut stats = RunningStats::default();
        let mut start = 0;
        while start + LANES <= n_rollouts {
            for cost in self.rollout_lanes(policy, seed, start)? {
                stats.push(cost);
            }
            start += LANES;
        }
        for i in start..n_rollouts {
            let mut rng = seed::substream(seed, &[i as u64]);
            stats.push(self.rollout(policy, &mut rng)?);
        }
        Ok(stats.estimate())
    }

    /// Rollouts `first..first + LANES` of `seed`, stepped in lockstep.
    ///
    /// Bit-identical to running them one at a time; interleaving only hides
    /// the latency of the serial filter recursion.
    fn rollout_lanes(&self, policy: ThresholdPolicy, seed: u64, first: usize) -> Result<[f64; LANES], PomdpError> {
        const LOW: u64 = 0xFFFF_FFFF;
        let tau = policy.tau();
        let mut rngs: [seed::Stream; LANES] = std::array::from_fn(|k| seed::substream(seed, &[(first + k) as u64]));
        let mut state = [0usize; LANES];
        for (s, rng) in state.iter_mut().zip(rngs.iter_mut()) {
            *s = (rng.random::<f64>() < self.b0_legit) as usize;
        }
        let mut ts = [self.b0_legit; LANES];
        let mut total = [0.0; LANES];
        let mut discount = 1.0;
        for _ in 0..self.horizon {
            for k in 0..LANES {
                let action = (tau < ts[k]) as usize;
                total[k] += discount * self.cost[state[k]][action];
                let draw = rngs[k].next_u64();
                let next = ((draw >> 32) >= self.adv_cut[state[k]][action]) as usize;
                let observation = ((draw & LOW) >= self.alert_cut[next]) as usize;
                ts[k] = filter_step(ts[k], &self.trans[action], &self.obs, observation)?;
                state[k] = next;
            }
            discount *= self.rho;
        }
        Ok(total)
    }
}

const LANES: usize = 8;

/// Samples one trajectory and returns its discounted cost.
pub fn rollout<R: Rng + ?Sized>(
    theta: &Scenario,
    config: &PomdpConfig,
    policy: ThresholdPolicy,
    rng: &mut R,
) -> Result<RolloutRecord, PomdpError> {
    let cost = Model::new(theta, config).rollout(policy, rng)?;
    Ok(RolloutRecord {
        discounted_cost: cost,
        trajectory: None,
    })
}

/// Like [`rollout`] but also records every step.
pub fn rollout_traced<R: Rng + ?Sized>(
    theta: &Scenario,
    config: &PomdpConfig,
    policy: ThresholdPolicy,
    rng: &mut R,
) -> Result<RolloutRecord, PomdpError> {
    let mut steps = Vec::with_capacity(config.horizon);
    let cost = Model::new(theta, config).run(policy, rng, Some(&mut steps))?;
    Ok(RolloutRecord {
        discounted_cost: cost,
        trajectory: Some(steps),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Welford accumulator. Identical samples leave the variance at exactly zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation (n - 1 denominator); zero below two samples.
    pub fn std_dev(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2.max(0.0) / (self.n - 1) as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> ValueEstimate {
        ValueEstimate {
            mean: self.mean,
            std_error: if self.n == 0 {
                0.0
            } else {
                self.std_dev() / (self.n as f64).sqrt()
            },
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::default();
        iter.into_iter().for_each(|x| s.push(x));
        s
    }
}

/// Mean and standard error of `n_rollouts` independent rollouts.
pub fn mc_value_estimate(
    theta: &Scenario,
    config: &PomdpConfig,
    policy: ThresholdPolicy,
    n_rollouts: usize,
    seed: u64,
) -> Result<ValueEstimate, PomdpError> {
    if n_rollouts == 0 {
        return Err(PomdpError::InvalidConfig {
            field: "n_rollouts",
            reason: "must be at least 1".into(),
        });
    }
    Model::new(theta, config).value_estimate(policy, n_rollouts, seed)
}

/// Exact expected discounted cost over `horizon` steps, by enumerating every
/// initial state and every (state, observation) continuation.
pub fn exact_value(
    theta: &Scenario,
    config: &PomdpConfig,
    policy: ThresholdPolicy,
    horizon: usize,
) -> Result<f64, PomdpError> {
    exact_value_with_budget(theta, config, policy, horizon, DEFAULT_PATH_BUDGET)
}

pub fn exact_value_with_budget(
    theta: &Scenario,
    config: &PomdpConfig,
    policy: ThresholdPolicy,
    horizon: usize,
    budget: u64,
) -> Result<f64, PomdpError> {
    if horizon == 0 {
        return Ok(0.0);
    }
    let paths: u128 = 2u128 * 4u128.saturating_pow(horizon as u32 - 1);
    if paths > budget as u128 {
        return Err(PomdpError::HorizonTooLarge { horizon, paths, budget });
    }
    let walk = PathWalk {
        theta,
        config,
        policy,
        horizon,
    };
    let mut total = 0.0;
    for s0 in State::ALL {
        let p = if s0 == State::Legitimate {
            config.b0_legit
        } else {
            1.0 - config.b0_legit
        };
        if p > 0.0 {
            total += walk.descend(0, s0, Belief { ts: config.b0_legit }, p, 1.0)?;
        }
    }
    Ok(total)
}

struct PathWalk<'a> {
    theta: &'a Scenario,
    config: &'a PomdpConfig,
    policy: ThresholdPolicy,
    horizon: usize,
}

impl PathWalk<'_> {
    /// Probability-weighted discounted cost from step `k` onward along a path
    /// that has reached `state` with filter output `belief`.
    fn descend(&self, k: usize, state: State, belief: Belief, prob: f64, discount: f64) -> Result<f64, PomdpError> {
        let action = self.policy.act(belief.ts);
        let mut acc = prob * discount * self.config.cost.get(state, action);
        if k + 1 == self.horizon {
            return Ok(acc);
        }
        let trans = transition_matrix(self.theta, action);
        let obs = observation_matrix(self.config);
        for next in State::ALL {
            for o in Observation::ALL {
                let p = prob * trans[state.index()][next.index()] * obs[next.index()][o.index()];
                if p == 0.0 {
                    continue;
                }
                let b = belief_update(belief, action, o, self.theta, self.config)?;
                acc += self.descend(k + 1, next, b, p, discount * self.config.rho)?;
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn assert_matrix(m: Matrix2, expected: Matrix2) {
        for i in 0..2 {
            for j in 0..2 {
                assert!(close(m[i][j], expected[i][j], 1e-15), "{m:?} != {expected:?}");
            }
        }
    }

    #[test]
    fn transition_matrices_for_baseline() {
        let theta = Scenario::new(0.2, 0.1, 0.8, 0.5).unwrap();
        assert_matrix(transition_matrix(&theta, Action::Reset), [[0.2, 0.8], [0.1, 0.9]]);
        assert_matrix(transition_matrix(&theta, Action::Continue), [[0.8, 0.2], [0.5, 0.5]]);
    }

    #[test]
    fn observation_matrix_cases() {
        let mut c = PomdpConfig::baseline();
        assert_matrix(observation_matrix(&c), [[0.9, 0.1], [0.1, 0.9]]);
        c.q_a = 0.5;
        c.q_u = 0.5;
        let o = observation_matrix(&c);
        assert_eq!(o[0], o[1]);
        c.q_a = 1.0;
        c.q_u = 0.0;
        assert_eq!(observation_matrix(&c), [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn uninformative_observation_is_pure_prediction() {
        let mut c = PomdpConfig::baseline();
        c.q_a = 0.5;
        c.q_u = 0.5;
        let theta = Scenario::new(0.2, 0.1, 0.8, 0.5).unwrap();
        for o in Observation::ALL {
            let b = belief_update(Belief::new(0.5).unwrap(), Action::Continue, o, &theta, &c).unwrap();
            assert!(close(b.trust_score(), 0.35, 1e-15));
            assert!(close(b.as_array()[0], 0.65, 1e-15));
        }
    }

    #[test]
    fn certainty_is_absorbing() {
        let c = PomdpConfig::baseline();
        let theta = Scenario::new(0.2, 0.1, 0.8, 0.0).unwrap();
        for o in Observation::ALL {
            let b = belief_update(Belief::new(1.0).unwrap(), Action::Continue, o, &theta, &c).unwrap();
            assert_eq!(b.trust_score(), 1.0);
        }
    }

    #[test]
    fn alert_under_identity_dynamics() {
        // posterior legit = 0.5*0.1 / (0.5*0.1 + 0.5*0.9)
        let c = PomdpConfig::baseline();
        let theta = Scenario::new(0.2, 0.1, 1.0, 0.0).unwrap();
        let b = belief_update(
            Belief::new(0.5).unwrap(),
            Action::Continue,
            Observation::Alert,
            &theta,
            &c,
        )
        .unwrap();
        assert!(close(b.trust_score(), 0.1, 1e-15));
    }

    #[test]
    fn impossible_observation_is_an_error() {
        let mut c = PomdpConfig::baseline();
        c.q_a = 1.0;
        c.q_u = 1.0; // alert is certain
        let theta = Scenario::baseline();
        let err = belief_update(
            Belief::new(0.5).unwrap(),
            Action::Continue,
            Observation::Quiet,
            &theta,
            &c,
        );
        assert!(matches!(err, Err(PomdpError::ZeroLikelihood { .. })));
    }

    #[test]
    fn threshold_policy_boundary() {
        let p = ThresholdPolicy::new(0.5).unwrap();
        assert_eq!(p.act(0.7), Action::Continue);
        assert_eq!(p.act(0.5), Action::Reset);
        assert_eq!(p.act(0.2), Action::Reset);
        let top = ThresholdPolicy::new(1.0).unwrap();
        for ts in [0.0, 0.3, 0.999, 1.0] {
            assert_eq!(top.act(ts), Action::Reset);
        }
        assert!(ThresholdPolicy::new(1.2).is_err());
    }

    #[test]
    fn zero_and_constant_costs() {
        let theta = Scenario::baseline();
        let mut c = PomdpConfig::baseline();
        c.cost = CostMatrix::zero();
        let p = ThresholdPolicy::new(0.5).unwrap();
        let mut rng = seed::stream(1);
        assert_eq!(rollout(&theta, &c, p, &mut rng).unwrap().discounted_cost, 0.0);
        let est = mc_value_estimate(&theta, &c, p, 17, 3).unwrap();
        assert_eq!((est.mean, est.std_error), (0.0, 0.0));

        c.cost = CostMatrix::constant(1.0);
        let expected = (1.0 - 0.86f64.powi(100)) / 0.14;
        assert!(close(expected, 7.142857, 1e-5));
        for s in 0..20 {
            let r = rollout(&theta, &c, p, &mut seed::stream(s)).unwrap();
            assert!(close(r.discounted_cost, expected, 1e-12));
        }
        let est = mc_value_estimate(&theta, &c, p, 50, 9).unwrap();
        assert!(close(est.mean, expected, 1e-12));
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn rollouts_are_reproducible() {
        let theta = Scenario::baseline();
        let mut c = PomdpConfig::baseline();
        c.horizon = 6;
        let p = ThresholdPolicy::new(0.5).unwrap();
        let a = rollout(&theta, &c, p, &mut seed::stream(42)).unwrap();
        let b = rollout(&theta, &c, p, &mut seed::stream(42)).unwrap();
        assert_eq!(a.discounted_cost.to_bits(), b.discounted_cost.to_bits());
        let t = rollout_traced(&theta, &c, p, &mut seed::stream(42)).unwrap();
        assert_eq!(t.discounted_cost.to_bits(), a.discounted_cost.to_bits());
        assert_eq!(t.trajectory.unwrap().len(), 6);
    }

    #[test]
    fn traced_costs_match_the_recorded_steps() {
        let theta = Scenario::baseline();
        let c = PomdpConfig::baseline();
        let p = ThresholdPolicy::new(0.6).unwrap();
        let rec = rollout_traced(&theta, &c, p, &mut seed::stream(5)).unwrap();
        let steps = rec.trajectory.unwrap();
        let mut total = 0.0;
        let mut discount = 1.0;
        for s in &steps {
            assert_eq!(s.action, p.act(s.trust_score));
            total += discount * c.cost.get(s.state, s.action);
            discount *= c.rho;
        }
        assert_eq!(total, rec.discounted_cost);
    }

    #[test]
    fn single_step_exact_value() {
        let theta = Scenario::baseline();
        let c = PomdpConfig::baseline();
        let p = ThresholdPolicy::new(0.5).unwrap();
        let v = exact_value(&theta, &c, p, 1).unwrap();
        assert!(close(v, 6.5, 1e-12));
        let mut z = c;
        z.cost = CostMatrix::zero();
        assert_eq!(exact_value(&theta, &z, p, 6).unwrap(), 0.0);
    }

    #[test]
    fn exact_value_of_constant_cost_is_geometric() {
        let theta = Scenario::baseline();
        let mut c = PomdpConfig::baseline();
        c.cost = CostMatrix::constant(2.0);
        let p = ThresholdPolicy::new(0.4).unwrap();
        let v = exact_value(&theta, &c, p, 7).unwrap();
        assert!(close(v, 2.0 * (1.0 - 0.86f64.powi(7)) / 0.14, 1e-12));
    }

    #[test]
    fn exact_value_budget() {
        let theta = Scenario::baseline();
        let c = PomdpConfig::baseline();
        let p = ThresholdPolicy::new(0.5).unwrap();
        let err = exact_value_with_budget(&theta, &c, p, 8, 1000);
        assert!(matches!(err, Err(PomdpError::HorizonTooLarge { horizon: 8, .. })));
        assert!(exact_value(&theta, &c, p, 40).is_err());
    }

    #[test]
    fn mc_agrees_with_exact_on_short_horizon() {
        let theta = Scenario::baseline();
        let mut c = PomdpConfig::baseline();
        c.horizon = 6;
        let p = ThresholdPolicy::new(0.5).unwrap();
        let exact = exact_value(&theta, &c, p, 6).unwrap();
        let est = mc_value_estimate(&theta, &c, p, 10_000, 2024).unwrap();
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.std_error,
            "mc {} +- {} vs exact {}",
            est.mean,
            est.std_error,
            exact
        );
    }

    #[test]
    fn config_validation() {
        let mut c = PomdpConfig::baseline();
        assert!(c.validate().is_ok());
        c.rho = 1.2;
        assert!(matches!(
            c.validate(),
            Err(PomdpError::InvalidConfig { field: "rho", .. })
        ));
        let mut c = PomdpConfig::baseline();
        c.horizon = 0;
        assert!(c.validate().is_err());
        let mut c = PomdpConfig::baseline();
        c.q_u = -0.1;
        assert!(matches!(
            c.validate(),
            Err(PomdpError::ProbabilityOutOfRange { field: "q_u", .. })
        ));
        assert!(Scenario::new(0.2, 1.1, 0.8, 0.5).is_err());
    }

    #[test]
    fn threshold_regime_bounds() {
        let base = Scenario::baseline();
        let (lo, hi) = base.regime_range(ScenarioField::PUN).unwrap();
        assert!(close(lo, 0.0, 1e-12) && close(hi, 0.7, 1e-12));
        let (lo, hi) = base.regime_range(ScenarioField::PAN).unwrap();
        assert!(close(lo, 0.6, 1e-12) && close(hi, 1.0, 1e-12));
        assert!(base.with(ScenarioField::PUN, 0.7).is_threshold_regime());
        assert!(!base.with(ScenarioField::PUN, 0.71).is_threshold_regime());
        assert!(base.with(ScenarioField::PAN, 0.6).is_threshold_regime());
        assert!(!base.with(ScenarioField::PAN, 0.59).is_threshold_regime());
    }

    fn arb_scenario() -> impl Strategy<Value = Scenario> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(a, b, c, d)| Scenario::new(a, b, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn transitions_are_stochastic(theta in arb_scenario()) {
            for a in Action::ALL {
                for row in transition_matrix(&theta, a) {
                    prop_assert!((row[0] + row[1] - 1.0).abs() <= 1e-15);
                }
            }
        }

        #[test]
        fn alerts_never_raise_trust(
            theta in arb_scenario(),
            ts in 0.0..=1.0f64,
            q_u in 0.01..0.5f64,
            gap in 0.01..0.49f64,
        ) {
            let mut c = PomdpConfig::baseline();
            c.q_u = q_u;
            c.q_a = q_u + gap;
            for a in Action::ALL {
                let t = transition_matrix(&theta, a);
                let predicted = (1.0 - ts) * t[0][1] + ts * t[1][1];
                let b = Belief::new(ts).unwrap();
                let alert = belief_update(b, a, Observation::Alert, &theta, &c).unwrap();
                let quiet = belief_update(b, a, Observation::Quiet, &theta, &c).unwrap();
                prop_assert!(alert.trust_score() <= predicted + 1e-12);
                prop_assert!(quiet.trust_score() >= predicted - 1e-12);
            }
        }

        #[test]
        fn discounted_cost_is_bounded(
            theta in arb_scenario(),
            tau in 0.0..=1.0f64,
            costs in proptest::array::uniform4(-5.0..20.0f64),
            s in any::<u64>(),
        ) {
            let mut c = PomdpConfig::baseline();
            c.horizon = 30;
            c.cost = CostMatrix::from_rows([[costs[0], costs[1]], [costs[2], costs[3]]]);
            let scale = 1.0 / (1.0 - c.rho);
            let r = rollout(&theta, &c, ThresholdPolicy::new(tau).unwrap(), &mut seed::stream(s)).unwrap();
            prop_assert!(r.discounted_cost <= c.cost.max().max(0.0) * scale + 1e-9);
            prop_assert!(r.discounted_cost >= c.cost.min().min(0.0) * scale - 1e-9);
        }
    }
}
