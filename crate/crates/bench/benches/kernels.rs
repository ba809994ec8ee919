use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tppo_core::advantage::{egae_window, gae, td_residuals, Boundary, GaeConfig};
use tppo_core::envs::{sample_task, TaskKind};
use tppo_core::nn::{seeded_nets, Featurizer, DEFAULT_HIDDEN, DEFAULT_INIT_SCALE};
use tppo_core::sim::{compare, LengthDistribution};

fn advantages(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let values: Vec<f64> = (0..96).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rewards = vec![0.0; 96];
    rewards[95] = 1.0;
    let cfg = GaeConfig::default();
    c.bench_function("gae_96", |b| {
        b.iter(|| {
            let d = td_residuals(&rewards, &values, Boundary::Terminal, &cfg).unwrap();
            black_box(gae(&d, &cfg))
        })
    });
    c.bench_function("egae_window_32", |b| {
        b.iter(|| black_box(egae_window(&values[..32], &rewards[..32], false, &cfg).unwrap()))
    });
}

fn network(c: &mut Criterion) {
    let f = Featurizer::new(8, 96);
    let (policy, value) = seeded_nets(&f, DEFAULT_HIDDEN, DEFAULT_INIT_SCALE, 0);
    let task = sample_task(TaskKind::ModularSum, 3);
    let x = f.encode(task.task_kind, &task.prompt_tokens, &[1, 2, 3]);
    c.bench_function("policy_logprobs", |b| {
        b.iter(|| black_box(policy.logprobs(&x).unwrap()))
    });
    let upstream = vec![0.1; policy.net.shape().output];
    c.bench_function("policy_backprop", |b| {
        b.iter(|| black_box(policy.net.backprop(&x, &upstream).unwrap()))
    });
    c.bench_function("value_predict", |b| {
        b.iter(|| black_box(value.predict(&x).unwrap()))
    });
}

fn simulator(c: &mut Criterion) {
    let d = LengthDistribution::lognormal_with_median(24.0, 0.9, 96);
    c.bench_function("compare_lognormal_K32_1000_steps", |b| {
        b.iter(|| black_box(compare(32, 32, &d, 1000, 7).unwrap().speedup))
    });
}

criterion_group!(benches, advantages, network, simulator);
criterion_main!(benches);
