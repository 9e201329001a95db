use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use ztd_core::meta::{foml_step, MetaMode, MetaTrainerState, MonteCarloObjective, ScenarioSet};
use ztd_core::pomdp::{Model, PomdpConfig, Scenario, ThresholdPolicy};
use ztd_core::seed::substream;
use ztd_core::spsa::SpsaSchedule;

fn rollout(c: &mut Criterion) {
    let model = Model::new(&Scenario::baseline(), &PomdpConfig::baseline());
    let policy = ThresholdPolicy::clamped(0.7);
    let mut rng = substream(1, &[0]);
    c.bench_function("rollout_horizon_100", |b| {
        b.iter(|| model.rollout(black_box(policy), &mut rng).unwrap())
    });
}

fn value_estimate(c: &mut Criterion) {
    let model = Model::new(&Scenario::baseline(), &PomdpConfig::baseline());
    let policy = ThresholdPolicy::clamped(0.7);
    c.bench_function("value_estimate_100_rollouts", |b| {
        b.iter(|| model.value_estimate(black_box(policy), 100, 7).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let scenarios: Vec<Scenario> = (0..10)
        .map(|i| Scenario::baseline().with(ztd_core::pomdp::ScenarioField::PUN, 0.05 * i as f64))
        .collect();
    let set = ScenarioSet::new(scenarios, "bench").unwrap();
    let objective = MonteCarloObjective::new(PomdpConfig::baseline(), 100).unwrap();
    let batch: Vec<usize> = (0..10).collect();
    let state = MetaTrainerState::new(0.5, set.len(), MetaMode::Agnostic, SpsaSchedule::default(), 3);
    c.bench_function("foml_step_batch_10", |b| {
        b.iter(|| foml_step(state.clone(), &set, &batch, &objective).unwrap())
    });
}

criterion_group!(benches, rollout, value_estimate, train_step);
criterion_main!(benches);
