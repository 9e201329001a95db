//! Simultaneous-perturbation gradient estimates for a scalar threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameter {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// A step-size sequence indexed by iteration `t >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant {
        value: f64,
    },
    /// `scale / (t + offset)^exponent`.
    PowerDecay {
        scale: f64,
        offset: f64,
        exponent: f64,
    },
}

impl StepSchedule {
    pub fn at(&self, t: u64) -> f64 {
        debug_assert!(t >= 1, "schedules are indexed from t = 1");
        match *self {
            StepSchedule::Constant { value } => value,
            StepSchedule::PowerDecay {
                scale,
                offset,
                exponent,
            } => scale / (t as f64 + offset).powf(exponent),
        }
    }

    fn validate(&self, field: &'static str, require_nonincreasing: bool) -> Result<(), ScheduleError> {
        let bad = |reason: &str| {
            Err(ScheduleError::Invalid {
                field,
                reason: reason.to_string(),
            })
        };
        match *self {
            StepSchedule::Constant { value } => {
                if !(value > 0.0 && value.is_finite()) {
                    return bad("constant step must be positive and finite");
                }
            }
            StepSchedule::PowerDecay {
                scale,
                offset,
                exponent,
            } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return bad("scale must be positive and finite");
                }
                if !(offset > -1.0 && offset.is_finite()) {
                    return bad("offset must exceed -1 so that t + offset > 0 at t = 1");
                }
                if !exponent.is_finite() || (require_nonincreasing && exponent < 0.0) {
                    return bad("exponent must be finite and nonnegative");
                }
            }
        }
        Ok(())
    }
}

/// Perturbation, descent, ascent and adaptation step sizes plus the stopping
/// tolerance of the meta-learning loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpsaSchedule {
    /// Perturbation magnitude `eta_t`.
    pub eta: StepSchedule,
    /// Meta descent step `alpha_t`.
    pub alpha: StepSchedule,
    /// Scenario-weight ascent step `beta_t`.
    pub beta: StepSchedule,
    /// Constant adaptation step.
    pub gamma: f64,
    /// Stopping tolerance on gradient magnitudes.
    pub epsilon: f64,
}

impl Default for SpsaSchedule {
    /// `eta_t = 0.4 / t^0.2`, `alpha_t = beta_t = 0.017 / (t + 50)^0.602`,
    /// `gamma = 0.005`, `epsilon = 1e-3`.
    fn default() -> Self {
        let descent = StepSchedule::PowerDecay {
            scale: 0.017,
            offset: 50.0,
            exponent: 0.602,
        };
        SpsaSchedule {
            eta: StepSchedule::PowerDecay {
                scale: 0.4,
                offset: 0.0,
                exponent: 0.2,
            },
            alpha: descent,
            beta: descent,
            gamma: 0.005,
            epsilon: 1e-3,
        }
    }
}

impl SpsaSchedule {
    pub fn eta(&self, t: u64) -> f64 {
        self.eta.at(t)
    }

    pub fn alpha(&self, t: u64) -> f64 {
        self.alpha.at(t)
    }

    pub fn beta(&self, t: u64) -> f64 {
        self.beta.at(t)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        self.eta.validate("eta", true)?;
        self.alpha.validate("alpha", false)?;
        self.beta.validate("beta", false)?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(ScheduleError::Invalid {
                field: "gamma",
                reason: format!("{} is not positive", self.gamma),
            });
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ScheduleError::Invalid {
                field: "epsilon",
                reason: format!("{} is not positive", self.epsilon),
            });
        }
        Ok(())
    }
}

/// Rademacher perturbation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        if rng.random_bool(0.5) {
            Direction::Up
        } else {
            Direction::Down
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Direction::Up => 1.0,
            Direction::Down => -1.0,
        }
    }
}

/// `min(1, max(0, x))`.
#[inline]
pub fn project_unit_interval(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Two-point estimate of `dU/dtau` at `tau` with a random direction.
pub fn spsa_gradient<F, E, R>(objective: F, tau: f64, eta: f64, rng: &mut R) -> Result<f64, E>
where
    F: FnMut(f64) -> Result<f64, E>,
    R: Rng + ?Sized,
{
    spsa_gradient_along(objective, tau, eta, Direction::sample(rng))
}

/// Two-point estimate along a fixed direction `d`:
/// `(U(P(tau + eta d)) - U(P(tau - eta d))) / (2 eta d)` with `P` the
/// projection onto `[0, 1]`.
///
/// The denominator stays `2 eta d` even when the projection clips a point,
/// which biases estimates next to the interval ends.
pub fn spsa_gradient_along<F, E>(mut objective: F, tau: f64, eta: f64, d: Direction) -> Result<f64, E>
where
    F: FnMut(f64) -> Result<f64, E>,
{
    let step = eta * d.sign();
    let upper = objective(project_unit_interval(tau + step))?;
    let lower = objective(project_unit_interval(tau - step))?;
    Ok((upper - lower) / (2.0 * step))
}
