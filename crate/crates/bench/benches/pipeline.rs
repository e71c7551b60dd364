//! Criterion benches for the pipeline hot paths: full-horizon sampling
//! across model widths, one environment tick, and one filter tick.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector6;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pegdiff_core::ddpm::{sample, SampleOptions, VarianceSchedule};
use pegdiff_core::env::{make_task, EnvConfig, Environment, InitialPose, TaskName};
use pegdiff_core::filter::{DsFilter, FilterConfig};
use pegdiff_core::net::{NetConfig, NetParams};
use pegdiff_core::types::Wrench;

fn bench_sampling(c: &mut Criterion) {
    let sched = VarianceSchedule::build(50, 1e-4, 1e-2).unwrap();
    let mut group = c.benchmark_group("sample_full_horizon");
    group.sample_size(10);
    for width in [128usize, 256, 512, 1024] {
        let params = NetParams::init(NetConfig { width, ..Default::default() }, 7).unwrap();
        let obs = vec![0.1; params.config.obs_dim];
        group.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, _| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| {
                sample(
                    black_box(&obs),
                    &params,
                    &sched,
                    &mut rng,
                    &SampleOptions::default(),
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn bench_env_step(c: &mut Criterion) {
    c.bench_function("env_step", |b| {
        let mut env =
            Environment::new(make_task(TaskName::Cuboid), EnvConfig::default()).unwrap();
        env.reset_to(InitialPose { lateral: 1e-3, tilt: 0.02, goal_offset: -5e-4 });
        let push = Wrench::new(nalgebra::Vector3::new(2.0, 0.0, -10.0), nalgebra::Vector3::zeros());
        b.iter(|| env.step(black_box(&push)).unwrap())
    });
}

fn bench_filter_step(c: &mut Criterion) {
    c.bench_function("filter_step", |b| {
        let mut filter = DsFilter::new(FilterConfig::default());
        let input = Vector6::new(1.0, -2.0, 3.0, 0.1, -0.2, 0.3);
        b.iter(|| filter.step(black_box(&input)).unwrap())
    });
}

criterion_group!(benches, bench_sampling, bench_env_step, bench_filter_step);
criterion_main!(benches);
