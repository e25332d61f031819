use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use driftopt_bench::desk_fixture;
use driftopt_core::changepoint::detect_change_points;
use driftopt_core::deploy::run_deployment;
use driftopt_core::hmm::{fit_hmm, posterior_table};
use driftopt_core::learner::{objective_and_gradient, train_stationary_bundle, ObjectiveKind};
use driftopt_core::{DetectorConfig, Exp4sConfig, HmmFitConfig, SimRng, Switcher, TrainConfig};

fn detector(c: &mut Criterion) {
    let (_, log) = desk_fixture(1);
    let rewards: Vec<f64> = log.iter().map(|d| d.reward).collect();
    let cfg = DetectorConfig::new(800, 0.05).unwrap();
    c.bench_function("detect/T=20000", |b| b.iter(|| detect_change_points(black_box(&rewards), &cfg).unwrap()));
}

fn hmm(c: &mut Criterion) {
    let (env, log) = desk_fixture(1);
    let fm = env.feature_map();
    let fit_cfg = HmmFitConfig {
        states: 5,
        restarts: 1,
        max_iters: 20,
        tol: 0.0,
        seed: 1,
        ..Default::default()
    };
    let params = fit_hmm(&log, &fm, &fit_cfg).unwrap().params;
    c.bench_function("forward-backward/T=20000,L=5", |b| {
        b.iter(|| posterior_table(black_box(&params), &log).unwrap())
    });
    let mut group = c.benchmark_group("baum-welch");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    group.bench_function("20 iterations", |b| b.iter(|| fit_hmm(&log, &fm, &fit_cfg).unwrap()));
    group.finish();
}

fn learner(c: &mut Criterion) {
    let (env, log) = desk_fixture(1);
    let fm = env.feature_map();
    let theta = vec![0.1; fm.dim()];
    let mut group = c.benchmark_group("objective");
    for kind in [ObjectiveKind::Ips, ObjectiveKind::Dr, ObjectiveKind::Poem] {
        let cfg = TrainConfig { kind, ..Default::default() };
        group.bench_function(kind.to_string(), |b| {
            b.iter(|| objective_and_gradient(black_box(&theta), &log, &fm, &cfg, None).unwrap())
        });
    }
    group.finish();
}

fn deployment(c: &mut Criterion) {
    let (env, log) = desk_fixture(1);
    let fm = env.feature_map();
    let bundle = train_stationary_bundle(&log, &fm, &TrainConfig::default()).unwrap();
    let experts = driftopt_core::PolicyBundle::from_policies(vec![bundle.sub_policies[0].clone(); 5]).unwrap();
    let exp4s = Switcher::Exp4s(Exp4sConfig { eta: 0.1, beta: 5e-4, gamma: 0.0 });
    c.bench_function("deploy/exp4s,T=20000,L=5", |b| {
        b.iter_batched(
            || SimRng::new(3),
            |mut rng| run_deployment(&env, &experts, &exp4s, env.horizon(), None, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, detector, hmm, learner, deployment);
criterion_main!(benches);
