//! Property tests for configuration serialization.

use proptest::prelude::*;

use ztd_cli::config::{Family, Field, RunConfig, StepSpec};

fn config() -> impl Strategy<Value = RunConfig> {
    (
        any::<u64>(),
        (0.05..0.95f64, 0.05..0.95f64, 0.1..0.99f64, 1usize..200, 0.0..=1.0f64),
        prop::array::uniform4(-50.0..50.0f64),
        (prop::option::of(0.0..0.3f64), 2.0..50.0f64, prop::bool::ANY),
        (1usize..20, 20usize..500, 1u64..5000, 1usize..5, 0.0..=1.0f64),
        (0.01..1.0f64, 0.0..1.0f64, 1.0..100.0f64),
        (1usize..100, 1usize..200, 0.001..=0.1f64, prop::bool::ANY),
    )
        .prop_map(|(seed, pomdp, cost, scen, train, sched, eval)| {
            let mut c = RunConfig::default();
            c.master_seed = seed;
            (c.pomdp.q_a, c.pomdp.q_u, c.pomdp.rho, c.pomdp.horizon, c.pomdp.b0_legit) = pomdp;
            c.pomdp.cost = [[cost[0], cost[1]], [cost[2], cost[3]]];
            let (lo, concentration, point) = scen;
            c.scenarios.lo = lo;
            c.scenarios.concentration = concentration;
            if point {
                c.scenarios.family = Family::Point;
            }
            c.scenarios.varying = Field::PUN;
            let (batch, n, iters, window, tau) = train;
            c.training.batch_size = batch;
            c.training.n_scenarios = n;
            c.training.max_iters = iters;
            c.training.stop_window = window;
            c.training.tau_init = tau;
            let (scale, offset_frac, gamma_inv) = sched;
            c.training.schedule.eta = StepSpec::PowerDecay {
                scale,
                offset: offset_frac * 10.0,
                exponent: 0.2,
            };
            c.training.schedule.gamma = 1.0 / gamma_inv;
            let (seeds, tests, step, expected) = eval;
            c.evaluation.n_seeds = seeds;
            c.evaluation.n_test_scenarios = tests;
            c.evaluation.grid_step = step;
            c.evaluation.expected_cost_baseline = expected;
            c
        })
        .prop_filter("valid", |c| c.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn load_serialize_load_is_identical(c in config()) {
        let text = c.to_toml_string();
        let loaded = RunConfig::from_toml_str(&text, None).unwrap();
        prop_assert_eq!(&loaded, &c);
        prop_assert_eq!(loaded.to_toml_string(), text);
        prop_assert_eq!(loaded.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn digest_separates_seeds(c in config(), other in any::<u64>()) {
        prop_assume!(other != c.master_seed);
        let mut d = c.clone();
        d.master_seed = other;
        prop_assert_ne!(c.digest().unwrap(), d.digest().unwrap());
    }
}
