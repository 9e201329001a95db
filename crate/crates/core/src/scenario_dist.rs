//! Scenario distributions.
//!
//! Two families are supported: a Beta distribution rescaled onto `[lo, hi]`
//! that varies one scenario field around a fixed base scenario, and an
//! empirical distribution with finite support (for instance built from a
//! histogram of attack-group technique counts).

use std::collections::BTreeMap;
use std::io::Read;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::Beta;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{simplex_project, ScenarioSet};
use crate::pomdp::{Scenario, ScenarioField, VALIDITY_TOLERANCE};
use crate::seed;

/// Draws allowed per requested sample before giving up.
pub const MAX_RESAMPLES: usize = 1000;

#[derive(Debug, Error)]
pub enum DistributionError {
    #[error("mean {mean} is not strictly inside the support [{lo}, {hi}]")]
    MeanOutOfSupport { mean: f64, lo: f64, hi: f64 },

    #[error("invalid {field}: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("support [{lo}, {hi}] of {field} leaves the threshold regime of the base scenario (allowed [{allowed_lo}, {allowed_hi}])")]
    SupportOutsideRegime {
        field: &'static str,
        lo: f64,
        hi: f64,
        allowed_lo: f64,
        allowed_hi: f64,
    },

    #[error("{attempts} consecutive draws fell outside the threshold regime")]
    ValidityExhausted { attempts: usize },

    #[error("histogram needs at least two distinct technique counts")]
    DegenerateHistogram,

    #[error("group `{group_id}` has a negative technique count ({count})")]
    NegativeCount { group_id: String, count: i64 },

    #[error("histogram is empty")]
    EmptyHistogram,

    #[error("histogram csv: {0}")]
    Csv(#[from] csv::Error),
}

/// A Beta(alpha, beta) variable rescaled onto `[lo, hi]`, written into one
/// field of a base scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaledBeta {
    pub lo: f64,
    pub hi: f64,
    pub alpha: f64,
    pub beta: f64,
    pub varying: ScenarioField,
    pub base: Scenario,
}

impl ScaledBeta {
    pub fn new(
        lo: f64,
        hi: f64,
        alpha: f64,
        beta: f64,
        varying: ScenarioField,
        base: Scenario,
    ) -> Result<Self, DistributionError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(DistributionError::InvalidParameter {
                field: "alpha",
                reason: format!("{alpha} is not positive"),
            });
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(DistributionError::InvalidParameter {
                field: "beta",
                reason: format!("{beta} is not positive"),
            });
        }
        if !(lo < hi) {
            return Err(DistributionError::InvalidParameter {
                field: "support",
                reason: format!("lo = {lo} must be below hi = {hi}"),
            });
        }
        base.validate().map_err(|e| DistributionError::InvalidParameter {
            field: "base",
            reason: e.to_string(),
        })?;
        let outside = |(allowed_lo, allowed_hi): (f64, f64)| DistributionError::SupportOutsideRegime {
            field: varying.name(),
            lo,
            hi,
            allowed_lo,
            allowed_hi,
        };
        let allowed = base
            .regime_range(varying)
            .ok_or_else(|| outside((f64::NAN, f64::NAN)))?;
        if lo < allowed.0 - VALIDITY_TOLERANCE || hi > allowed.1 + VALIDITY_TOLERANCE {
            return Err(outside(allowed));
        }
        Ok(ScaledBeta {
            lo,
            hi,
            alpha,
            beta,
            varying,
            base,
        })
    }

    /// Shape parameters with `alpha + beta = concentration` and mean `mean`.
    pub fn from_mean(
        lo: f64,
        hi: f64,
        mean: f64,
        concentration: f64,
        varying: ScenarioField,
        base: Scenario,
    ) -> Result<Self, DistributionError> {
        if !(lo < mean && mean < hi) {
            return Err(DistributionError::MeanOutOfSupport { mean, lo, hi });
        }
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(DistributionError::InvalidParameter {
                field: "concentration",
                reason: format!("{concentration} is not positive"),
            });
        }
        let mu = (mean - lo) / (hi - lo);
        Self::new(lo, hi, concentration * mu, concentration * (1.0 - mu), varying, base)
    }

    pub fn mean(&self) -> f64 {
        self.lo + (self.hi - self.lo) * self.alpha / (self.alpha + self.beta)
    }

    pub fn mean_scenario(&self) -> Scenario {
        self.base.with(self.varying, self.mean())
    }
}

/// A finitely supported distribution over scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpiricalScenarioDist {
    support_points: Vec<Scenario>,
    weights: Vec<f64>,
    pub source_meta: String,
}

impl EmpiricalScenarioDist {
    /// Weights must be nonnegative with a positive total; they are normalized.
    pub fn new(
        support_points: Vec<Scenario>,
        weights: Vec<f64>,
        source_meta: impl Into<String>,
    ) -> Result<Self, DistributionError> {
        if support_points.is_empty() || support_points.len() != weights.len() {
            return Err(DistributionError::InvalidParameter {
                field: "weights",
                reason: format!("{} support points but {} weights", support_points.len(), weights.len()),
            });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(DistributionError::InvalidParameter {
                field: "weights",
                reason: "weights must be finite and nonnegative".into(),
            });
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(DistributionError::InvalidParameter {
                field: "weights",
                reason: "weights sum to zero".into(),
            });
        }
        if let Some(bad) = support_points.iter().find(|s| !s.is_threshold_regime()) {
            return Err(DistributionError::InvalidParameter {
                field: "support_points",
                reason: format!("{bad:?} is outside the threshold regime"),
            });
        }
        Ok(EmpiricalScenarioDist {
            support_points,
            weights: weights.iter().map(|w| w / total).collect(),
            source_meta: source_meta.into(),
        })
    }

    pub fn point_mass(scenario: Scenario) -> Result<Self, DistributionError> {
        Self::new(vec![scenario], vec![1.0], "point mass")
    }

    pub fn support_points(&self) -> &[Scenario] {
        &self.support_points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Component-wise weighted mean of the support.
    pub fn mean_scenario(&self) -> Scenario {
        let mut m = [0.0; 4];
        for (s, w) in self.support_points.iter().zip(&self.weights) {
            m[0] += w * s.p_a_d;
            m[1] += w * s.p_u_d;
            m[2] += w * s.p_a_n;
            m[3] += w * s.p_u_n;
        }
        Scenario {
            p_a_d: m[0],
            p_u_d: m[1],
            p_a_n: m[2],
            p_u_n: m[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScenarioDistribution {
    ScaledBeta(ScaledBeta),
    Empirical(EmpiricalScenarioDist),
}

impl From<ScaledBeta> for ScenarioDistribution {
    fn from(d: ScaledBeta) -> Self {
        ScenarioDistribution::ScaledBeta(d)
    }
}

impl From<EmpiricalScenarioDist> for ScenarioDistribution {
    fn from(d: EmpiricalScenarioDist) -> Self {
        ScenarioDistribution::Empirical(d)
    }
}

impl ScenarioDistribution {
    /// The scenario at the distribution mean.
    pub fn mean_scenario(&self) -> Scenario {
        match self {
            ScenarioDistribution::ScaledBeta(d) => d.mean_scenario(),
            ScenarioDistribution::Empirical(d) => d.mean_scenario(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ScenarioDistribution::ScaledBeta(d) => format!(
                "{} ~ {} + {} * Beta({}, {})",
                d.varying.name(),
                d.lo,
                d.hi - d.lo,
                d.alpha,
                d.beta
            ),
            ScenarioDistribution::Empirical(d) => {
                format!(
                    "empirical, {} support points ({})",
                    d.support_points.len(),
                    d.source_meta
                )
            }
        }
    }

    /// `n` i.i.d. scenarios. Draws outside the threshold regime are redrawn,
    /// up to [`MAX_RESAMPLES`] times in a row.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ScenarioSet, DistributionError> {
        if n == 0 {
            return Err(DistributionError::InvalidParameter {
                field: "n",
                reason: "must be at least 1".into(),
            });
        }
        let mut rng = seed::stream(seed);
        let mut out = Vec::with_capacity(n);
        match self {
            ScenarioDistribution::ScaledBeta(d) => {
                let beta = Beta::new(d.alpha, d.beta).map_err(|e| DistributionError::InvalidParameter {
                    field: "shape",
                    reason: e.to_string(),
                })?;
                while out.len() < n {
                    let mut attempts = 0;
                    loop {
                        let x: f64 = beta.sample(&mut rng);
                        let s = d.base.with(d.varying, d.lo + (d.hi - d.lo) * x);
                        if s.is_threshold_regime() {
                            out.push(s);
                            break;
                        }
                        attempts += 1;
                        if attempts >= MAX_RESAMPLES {
                            return Err(DistributionError::ValidityExhausted { attempts });
                        }
                    }
                }
            }
            ScenarioDistribution::Empirical(d) => {
                let pick = WeightedIndex::new(&d.weights).expect("weights are normalized");
                out.extend((0..n).map(|_| d.support_points[pick.sample(&mut rng)]));
            }
        }
        ScenarioSet::new(out, self.describe()).map_err(|e| DistributionError::InvalidParameter {
            field: "sample",
            reason: e.to_string(),
        })
    }
}

/// One attack group and the number of techniques attributed to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub group_id: String,
    pub technique_count: i64,
}

/// Reads `group_id,technique_count` rows (header required).
pub fn read_histogram_csv<R: Read>(reader: R) -> Result<Vec<HistogramRow>, DistributionError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows = rdr.deserialize().collect::<Result<Vec<HistogramRow>, _>>()?;
    Ok(rows)
}

/// Maps technique counts affinely onto `[lo, hi]` of `target` (smallest count
/// to `lo`, largest to `hi`) and weights each distinct count by the number of
/// groups that have it.
pub fn ingest_histogram(
    rows: &[HistogramRow],
    target: ScenarioField,
    lo: f64,
    hi: f64,
    base: Scenario,
    source_meta: impl Into<String>,
) -> Result<EmpiricalScenarioDist, DistributionError> {
    if rows.is_empty() {
        return Err(DistributionError::EmptyHistogram);
    }
    if let Some(row) = rows.iter().find(|r| r.technique_count < 0) {
        return Err(DistributionError::NegativeCount {
            group_id: row.group_id.clone(),
            count: row.technique_count,
        });
    }
    if !(lo < hi) {
        return Err(DistributionError::InvalidParameter {
            field: "support",
            reason: format!("lo = {lo} must be below hi = {hi}"),
        });
    }
    let mut groups: BTreeMap<i64, usize> = BTreeMap::new();
    for r in rows {
        *groups.entry(r.technique_count).or_default() += 1;
    }
    if groups.len() < 2 {
        return Err(DistributionError::DegenerateHistogram);
    }
    let c_min = *groups.keys().next().expect("nonempty") as f64;
    let c_max = *groups.keys().next_back().expect("nonempty") as f64;
    let (points, counts): (Vec<Scenario>, Vec<f64>) = groups
        .iter()
        .map(|(&c, &n)| {
            let value = lo + (hi - lo) * (c as f64 - c_min) / (c_max - c_min);
            (base.with(target, value), n as f64)
        })
        .unzip();
    let total: f64 = counts.iter().sum();
    let weights = simplex_project(&counts.iter().map(|n| n / total).collect::<Vec<_>>());
    EmpiricalScenarioDist::new(points, weights, source_meta)
}
