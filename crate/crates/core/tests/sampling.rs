//! Large-sample checks of the scenario distributions.

use proptest::prelude::*;

use ztd_core::scenario_dist::{EmpiricalScenarioDist, ScaledBeta, ScenarioDistribution};
use ztd_core::{Scenario, ScenarioField};

fn vulnerability(mean: f64) -> ScenarioDistribution {
    ScaledBeta::from_mean(0.0, 0.7, mean, 10.0, ScenarioField::PUN, Scenario::baseline())
        .unwrap()
        .into()
}

fn sample_mean(dist: &ScenarioDistribution, n: usize, seed: u64) -> f64 {
    let set = dist.sample(n, seed).unwrap();
    set.scenarios().iter().map(|s| s.p_u_n).sum::<f64>() / n as f64
}

#[test]
fn million_draw_means_match_the_requested_mean() {
    for (mean, seed) in [(0.05, 1), (0.55, 2)] {
        let m = sample_mean(&vulnerability(mean), 1_000_000, seed);
        assert!((m - mean).abs() <= 0.002, "mean {mean}: sample mean {m}");
    }
}

#[test]
fn sample_mean_error_shrinks_like_inverse_root_n() {
    // Beta(alpha, beta) on [0, 0.7] with alpha + beta = 10 has variance
    // 0.49 mu (1 - mu) / 11; the RMS error over 40 replicates at n draws
    // should sit near sqrt(variance / n).
    let mean = 0.35;
    let mu = mean / 0.7;
    let var = 0.49 * mu * (1.0 - mu) / 11.0;
    let dist = vulnerability(mean);
    for n in [1_000usize, 16_000] {
        let mse = (0..40u64)
            .map(|r| (sample_mean(&dist, n, 100 + r) - mean).powi(2))
            .sum::<f64>()
            / 40.0;
        let ratio = mse.sqrt() / (var / n as f64).sqrt();
        assert!((0.6..1.5).contains(&ratio), "n = {n}: RMS error ratio {ratio}");
    }
}

#[test]
fn empirical_frequencies_follow_the_weights() {
    let base = Scenario::baseline();
    let points = vec![base.with(ScenarioField::PAN, 0.6), base.with(ScenarioField::PAN, 1.0)];
    let dist: ScenarioDistribution = EmpiricalScenarioDist::new(points, vec![0.75, 0.25], "test")
        .unwrap()
        .into();
    let n = 200_000;
    let set = dist.sample(n, 9).unwrap();
    let low = set.scenarios().iter().filter(|s| s.p_a_n == 0.6).count() as f64 / n as f64;
    // Four standard deviations of a binomial proportion.
    assert!((low - 0.75).abs() < 4.0 * (0.75f64 * 0.25 / n as f64).sqrt(), "{low}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_draw_is_valid_and_in_support(mean in 0.01..0.69f64, kappa in 0.5..50.0f64, seed in any::<u64>()) {
        let dist: ScenarioDistribution =
            ScaledBeta::from_mean(0.0, 0.7, mean, kappa, ScenarioField::PUN, Scenario::baseline()).unwrap().into();
        let set = dist.sample(200, seed).unwrap();
        for s in set.scenarios() {
            prop_assert!(s.is_threshold_regime());
            prop_assert!((0.0..=0.7).contains(&s.p_u_n));
            prop_assert_eq!(s.with(ScenarioField::PUN, 0.5), Scenario::baseline());
        }
        let again = dist.sample(200, seed).unwrap();
        prop_assert_eq!(set.scenarios(), again.scenarios());
    }

    #[test]
    fn stealthiness_draws_stay_valid(mean in 0.61..0.99f64, seed in any::<u64>()) {
        let dist: ScenarioDistribution =
            ScaledBeta::from_mean(0.6, 1.0, mean, 10.0, ScenarioField::PAN, Scenario::baseline()).unwrap().into();
        for s in dist.sample(200, seed).unwrap().scenarios() {
            prop_assert!(s.is_threshold_regime());
            prop_assert!((0.6..=1.0).contains(&s.p_a_n));
        }
    }
}
