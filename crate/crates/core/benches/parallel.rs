use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use bdt_core::data::generate_dataset;
use bdt_core::envs::{make_env, Quality};
use bdt_core::eval::{default_target_rtg, rollout, AcquisitionMode, RolloutConfig};
use bdt_core::exec::Execution;
use bdt_core::policies::{Mode, Policy, PolicyConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn dataset_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, "gridnav/64"), &exec, |b, &exec| {
            b.iter(|| generate_dataset("gridnav", Quality::Expert, 64, 0, exec).unwrap())
        });
    }
    g.finish();
}

fn policy_rollout(c: &mut Criterion) {
    let ds = generate_dataset("gridnav", Quality::Expert, 20, 0, Execution::Sequential).unwrap();
    let spec = make_env("gridnav").unwrap().spec().clone();
    let policy = Policy::new(PolicyConfig::for_env(Mode::Bdt, &spec), 0).unwrap();
    let mut g = c.benchmark_group("rollout");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = RolloutConfig {
            episodes: 16,
            target_rtg: default_target_rtg(&ds),
            seed: 0,
            acquisition: AcquisitionMode::Policy,
            execution: exec,
        };
        g.bench_with_input(BenchmarkId::new(name, "bdt/16"), &cfg, |b, cfg| {
            b.iter(|| rollout(&policy, &ds.manifest.reference, cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, dataset_generation, policy_rollout);
criterion_main!(benches);
