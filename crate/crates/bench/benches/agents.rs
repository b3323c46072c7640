use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pe_design::model::fixture_by_name;
use pe_design::rng::stream;
use pe_design::{mse_experiment, run_agent, AgentSpec, SimConfig};

fn single_run(c: &mut Criterion) {
    let (env, pi) = fixture_by_name("unitball-d2").unwrap();
    let mut group = c.benchmark_group("run_agent");
    for name in ["speed", "oracle", "on-policy", "g-optimal"] {
        let spec: AgentSpec = name.parse().unwrap();
        for n in [2_000usize, 32_000] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, &n| {
                let mut rng = stream(1, &[n as u64]);
                b.iter(|| run_agent(&spec, &env, &pi, n, &mut rng).unwrap())
            });
        }
    }
    group.finish();
}

fn experiment(c: &mut Criterion) {
    let (env, pi) = fixture_by_name("unitball-d2").unwrap();
    let cfg = SimConfig {
        env_ref: "unitball-d2".into(),
        policy_ref: None,
        budgets: vec![500, 1000, 2000],
        replications: 20,
        master_seed: 0,
        agents: ["oracle", "speed", "on-policy"].iter().map(|a| a.parse().unwrap()).collect(),
        regret: true,
        regret_estimator: Default::default(),
        workers: None,
    };
    let mut group = c.benchmark_group("mse_experiment");
    group.sample_size(10);
    for workers in [1usize, 4] {
        group.bench_with_input(BenchmarkId::new("unitball-d2", workers), &workers, |b, &w| {
            b.iter(|| mse_experiment(&cfg, &env, &pi, Some(w)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, single_run, experiment);
criterion_main!(benches);
